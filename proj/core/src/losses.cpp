#include "tfl/losses.hpp"

#include <cmath>
#include <sstream>

namespace tfl {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

int64_t batch_of(const Tensor& t) {
  if (t.rank() == 3) return t.dim(0);
  if (t.rank() == 2) return 1;
  throw ShapeError("landmark tensors must be B x 2 x N or 2 x N, got " + shape_str(t.shape()));
}

} // namespace

std::string MetricsReport::tsv_header() { return "accuracy\twing_loss\tmae\tmse\tn_samples"; }

std::string MetricsReport::tsv_row() const {
  std::ostringstream os;
  os.precision(12);
  os << accuracy << '\t' << wing_loss << '\t' << mae << '\t' << mse << '\t' << n_samples;
  return os.str();
}

Tensor wing_loss(const Tensor& pred, const Tensor& target, double w, double eps) {
  require_same_shape("wing_loss", pred, target);
  if (w <= 0.0 || eps <= 0.0)
    throw ContractError("wing_loss: w and eps must be positive, got w=" + std::to_string(w) +
                        " eps=" + std::to_string(eps));
  int64_t batch = batch_of(pred);
  int64_t n = pred.numel();
  const double c = w - w * std::log(1.0 + w / eps);
  const auto& pv = pred.data();
  const auto& tv = target.data();

  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double e = std::fabs(pv[static_cast<size_t>(i)] - tv[static_cast<size_t>(i)]);
    total += e < w ? w * std::log(1.0 + e / eps) : e - c;
  }
  double inv_b = 1.0 / static_cast<double>(batch);

  Tensor pc = pred, tc = target;
  return autograd::make_op(
      OpKind::wing_loss_op, Shape{1}, {total * inv_b}, {pred, target},
      [pc, tc, w, eps, n, inv_b](const std::vector<double>& g) mutable {
        double g0 = g[0] * inv_b;
        double* gp = autograd::grad_slot(pc);
        double* gt = autograd::grad_slot(tc);
        if (!gp && !gt) return;
        const auto& pv2 = pc.data();
        const auto& tv2 = tc.data();
        for (int64_t i = 0; i < n; ++i) {
          double e = pv2[static_cast<size_t>(i)] - tv2[static_cast<size_t>(i)];
          double ae = std::fabs(e);
          double d = ae < w ? w / (eps + ae) : 1.0;
          double ge = g0 * (e < 0.0 ? -d : e > 0.0 ? d : 0.0);
          if (gp) gp[i] += ge;
          if (gt) gt[i] -= ge;
        }
      });
}

Tensor mae(const Tensor& pred, const Tensor& target) {
  require_same_shape("mae", pred, target);
  int64_t n = pred.numel();
  const auto& pv = pred.data();
  const auto& tv = target.data();
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) total += std::fabs(pv[static_cast<size_t>(i)] - tv[static_cast<size_t>(i)]);
  double inv_n = 1.0 / static_cast<double>(n);

  Tensor pc = pred, tc = target;
  return autograd::make_op(
      OpKind::mae_op, Shape{1}, {total * inv_n}, {pred, target},
      [pc, tc, n, inv_n](const std::vector<double>& g) mutable {
        double g0 = g[0] * inv_n;
        double* gp = autograd::grad_slot(pc);
        double* gt = autograd::grad_slot(tc);
        if (!gp && !gt) return;
        const auto& pv2 = pc.data();
        const auto& tv2 = tc.data();
        for (int64_t i = 0; i < n; ++i) {
          double e = pv2[static_cast<size_t>(i)] - tv2[static_cast<size_t>(i)];
          double ge = g0 * (e < 0.0 ? -1.0 : e > 0.0 ? 1.0 : 0.0);
          if (gp) gp[i] += ge;
          if (gt) gt[i] -= ge;
        }
      });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  require_same_shape("mse", pred, target);
  int64_t n = pred.numel();
  const auto& pv = pred.data();
  const auto& tv = target.data();
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double e = pv[static_cast<size_t>(i)] - tv[static_cast<size_t>(i)];
    total += e * e;
  }
  double inv_n = 1.0 / static_cast<double>(n);

  Tensor pc = pred, tc = target;
  return autograd::make_op(
      OpKind::mse_op, Shape{1}, {total * inv_n}, {pred, target},
      [pc, tc, n, inv_n](const std::vector<double>& g) mutable {
        double g0 = g[0] * inv_n;
        double* gp = autograd::grad_slot(pc);
        double* gt = autograd::grad_slot(tc);
        if (!gp && !gt) return;
        const auto& pv2 = pc.data();
        const auto& tv2 = tc.data();
        for (int64_t i = 0; i < n; ++i) {
          double ge = g0 * 2.0 * (pv2[static_cast<size_t>(i)] - tv2[static_cast<size_t>(i)]);
          if (gp) gp[i] += ge;
          if (gt) gt[i] -= ge;
        }
      });
}

double accuracy(const Tensor& pred, const Tensor& target, double tau) {
  require_same_shape("accuracy", pred, target);
  if (tau <= 0.0) throw ContractError("accuracy: tau must be positive, got " + std::to_string(tau));
  int64_t batch = batch_of(pred);
  int64_t n_pts = pred.dim(pred.rank() - 1);
  if (pred.dim(pred.rank() - 2) != 2)
    throw ShapeError("accuracy: coordinate axis must have extent 2, got " + shape_str(pred.shape()));

  const auto& pv = pred.data();
  const auto& tv = target.data();
  int64_t hits = 0;
  for (int64_t b = 0; b < batch; ++b) {
    const double* px = &pv[static_cast<size_t>(b * 2 * n_pts)];
    const double* py = px + n_pts;
    const double* tx = &tv[static_cast<size_t>(b * 2 * n_pts)];
    const double* ty = tx + n_pts;

    double xmin = tx[0], xmax = tx[0], ymin = ty[0], ymax = ty[0];
    for (int64_t i = 1; i < n_pts; ++i) {
      xmin = std::min(xmin, tx[i]);
      xmax = std::max(xmax, tx[i]);
      ymin = std::min(ymin, ty[i]);
      ymax = std::max(ymax, ty[i]);
    }
    double diag = std::hypot(xmax - xmin, ymax - ymin);
    if (diag == 0.0) diag = std::sqrt(2.0); // all landmarks coincide: use the image diagonal
    double thresh = tau * diag;

    for (int64_t i = 0; i < n_pts; ++i)
      if (std::hypot(px[i] - tx[i], py[i] - ty[i]) <= thresh) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(batch * n_pts);
}

} // namespace tfl
