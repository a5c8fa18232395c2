#include "meft/grad_check.hpp"

#include <cmath>
#include <stdexcept>

namespace meft {

Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, const Matrix& theta,
                        double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be > 0");
    Matrix grad(theta.rows, theta.cols);
    Matrix probe = theta;
    for (index_t i = 0; i < theta.size(); ++i) {
        const double saved = probe.data[i];
        probe.data[i] = saved + eps;
        const double fp = f(probe);
        probe.data[i] = saved - eps;
        const double fm = f(probe);
        probe.data[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw std::runtime_error("finite_diff_grad: non-finite function value");
        }
        grad.data[i] = (fp - fm) / (2.0 * eps);
    }
    return grad;
}

}  // namespace meft
