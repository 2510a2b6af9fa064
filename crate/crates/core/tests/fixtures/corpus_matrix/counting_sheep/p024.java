// solution 4
import java.util.HashSet;
import java.util.Scanner;
import java.util.Set;

public class Main {
  public static void main(String[] args) {
    Scanner in = new Scanner(System.in);
    int t = in.nextInt();
    for (int cs = 1; cs <= t; cs++) {
      int n = in.nextInt();
      if (n == 0) {
        System.out.println("Case #" + cs + ": INSOMNIA");
        continue;
      }
      Set<Character> digits = new HashSet<>();
      int k = 0;
      while (digits.size() < 10) {
        k++;
        for (char ch : String.valueOf(n * k).toCharArray()) {
          digits.add(ch);
        }
      }
      System.out.println("Case #" + cs + ": " + (n * k));
    }
  }
}
