import java.util.*;

public class B {
  static long solve(long n) {
    if (n == 0) return -1;
    boolean[] seen = new boolean[10];
    int count = 0;
    long cur = 0;
    while (count < 10) {
      cur += n;
      long x = cur;
      while (x > 0) {
        int d = (int) (x % 10);
        if (!seen[d]) { seen[d] = true; count++; }
        x /= 10;
      }
    }
    return cur;
  }

  public static void main(String[] args) {
    Scanner scanner = new Scanner(System.in);
    int t = scanner.nextInt();
    for (int x = 1; x <= t; x++) {
      long n = scanner.nextLong();
      long ans = solve(n);
      System.out.println("Case #" + x + ": " + (ans < 0 ? "INSOMNIA" : ans));
    }
  }
}
