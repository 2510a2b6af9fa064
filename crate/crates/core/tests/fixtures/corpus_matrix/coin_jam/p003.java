import java.math.BigInteger;
import java.util.*;

public class Solver {
  static BigInteger divisor(BigInteger v) {
    for (int d = 2; d < 1000; d++) {
      BigInteger bd = BigInteger.valueOf(d);
      if (v.mod(bd).equals(BigInteger.ZERO)) {
        return bd;
      }
    }
    return null;
  }

  public static void main(String[] args) {
    Scanner input = new Scanner(System.in);
    int t = input.nextInt();
    int n = input.nextInt();
    int j = input.nextInt();
    System.out.println("Case #1:");
    for (long mask = 0; j > 0; mask++) {
      String coin = "1" + String.format("%" + (n - 2) + "s", Long.toBinaryString(mask)).replace(' ', '0') + "1";
      StringBuilder line = new StringBuilder(coin);
      boolean ok = true;
      for (int base = 2; base <= 10 && ok; base++) {
        BigInteger d = divisor(new BigInteger(coin, base));
        if (d == null) ok = false; else line.append(' ').append(d);
      }
      if (ok) { System.out.println(line); j--; }
    }
  }
}
