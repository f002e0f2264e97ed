// Prints the regularized solution map of Example 3 over a range of x and then
// runs GS from both ends of the range.

#include <cstdio>
#include <cstdlib>

#include "bilevel/gs.hpp"
#include "bilevel/problems.hpp"
#include "bilevel/sensitivity.hpp"

int main(int argc, char** argv) {
  using namespace bilevel;
  const double ab = argc > 1 ? std::atof(argv[1]) : 0.1;
  const auto P = make_example3();

  std::printf("alpha = beta = %g\n%8s %12s %12s %12s %6s\n", ab, "x", "y", "dY/dx", "hypergrad", "ri");
  for (double x = -4.0; x <= 4.0 + 1e-12; x += 0.5) {
    const Vec xv = Vec::Constant(1, x);
    const auto hg = hyper_gradient(P, xv, ab, ab);
    const auto sol = solve_regularized(P.lower, xv, ab, ab);
    const auto jac = jacobian(P.lower, sol);
    std::printf("%8.3f %12.6f %12.6f %12.6f %6s\n", x, sol.y(0), jac.grad_Y(0, 0), hg.w(0), jac.ri_flag ? "yes" : "no");
  }

  for (double x0 : {-5.0, 5.0}) {
    GSParams prm;
    prm.x0 = Vec::Constant(1, x0);
    const auto res = run_gs(P, prm);
    std::printf("GS from %+.1f: x = %.3e after %zu iterations (%d descents, %d shrinks), %s\n", x0, res.x_final(0),
                res.records.size(), res.descents, res.shrinks, to_string(res.termination));
  }
  return 0;
}
