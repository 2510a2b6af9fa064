import java.util.*;

public class Problem {
  public static void main(String[] args) {
    Scanner input = new Scanner(System.in);
    int tc = input.nextInt();
    for (int x = 1; x <= tc; x++) {
      String s = input.next();
      Deque<Character> stack = new ArrayDeque<>();
      int gain = 0;
      for (int k = 0; k < s.length(); k++) {
        char ch = s.charAt(k);
        if (!stack.isEmpty() && stack.peek() == ch) {
          stack.pop();
          gain += 10;
        } else {
          stack.push(ch);
        }
      }
      gain += stack.size() / 2 * 5;
      System.out.println("Case #" + x + ": " + gain);
    }
  }
}
