import java.io.*;

public class Problem {
  static int count(String stack) {
    int res = 0;
    char prev = stack.charAt(0);
    for (char ch : stack.toCharArray()) {
      if (ch != prev) {
        res++;
        prev = ch;
      }
    }
    return prev == '-' ? res + 1 : res;
  }

  public static void main(String[] args) throws IOException {
    BufferedReader in = new BufferedReader(new InputStreamReader(System.in));
    int t = Integer.parseInt(in.readLine());
    for (int cs = 1; cs <= t; cs++) {
      System.out.println("Case #" + cs + ": " + count(in.readLine()));
    }
  }
}
