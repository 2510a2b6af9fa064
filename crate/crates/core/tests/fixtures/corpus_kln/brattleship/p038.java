// solution 6
import java.io.*;
import java.util.*;

public class B {
  public static void main(String[] args) throws IOException {
    BufferedReader in = new BufferedReader(new InputStreamReader(System.in));
    int cases = Integer.parseInt(in.readLine().trim());
    for (int tt = 0; tt < cases; tt++) {
      StringTokenizer st = new StringTokenizer(in.readLine());
      int r = Integer.parseInt(st.nextToken());
      int c = Integer.parseInt(st.nextToken());
      int w = Integer.parseInt(st.nextToken());
      int base = (c / w) * r;
      if (c % w == 0) {
        base += w - 1;
      } else {
        base += w;
      }
      System.out.println("Case #" + (tt + 1) + ": " + base);
    }
  }
}
