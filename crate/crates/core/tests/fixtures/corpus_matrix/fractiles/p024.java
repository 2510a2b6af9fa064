// solution 4
import java.io.*;
import java.util.*;

public class Main {
  public static void main(String[] args) throws IOException {
    BufferedReader br = new BufferedReader(new InputStreamReader(System.in));
    int tests = Integer.parseInt(br.readLine().trim());
    for (int tt = 1; tt <= tests; tt++) {
      String[] parts = br.readLine().trim().split(" ");
      int tiles = Integer.parseInt(parts[0]);
      List<String> picks = new ArrayList<>();
      for (int p = 1; p <= tiles; p++) {
        picks.add(Integer.toString(p));
      }
      System.out.println("Case #" + tt + ": " + String.join(" ", picks));
    }
  }
}
