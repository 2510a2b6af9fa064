// solution 5
import java.util.Scanner;

public class Problem {
  public static void main(String[] args) {
    Scanner in = new Scanner(System.in);
    int t = in.nextInt();
    for (int caseNo = 1; caseNo <= t; caseNo++) {
      int r = in.nextInt();
      int c = in.nextInt();
      int w = in.nextInt();
      int ret = (r - 1) * (c / w);
      if ((c / w) * w == c) {
        ret += c / w - 1 + w;
      } else {
        ret += c / w + w;
      }
      System.out.println("Case #" + caseNo + ": " + ret);
    }
  }
}
