#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
// A Tape owns the computation graph for one forward pass; Parameters are
// persistent leaves whose gradients accumulate across backward calls.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "covt/errors.hpp"

namespace covt::ad {

using Mat = Eigen::MatrixXd;

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
  Mat m, v;  // optimizer moments
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Mat v0, bool train = true)
      : name(std::move(n)),
        value(std::move(v0)),
        grad(Mat::Zero(value.rows(), value.cols())),
        m(Mat::Zero(value.rows(), value.cols())),
        v(Mat::Zero(value.rows(), value.cols())),
        trainable(train) {}

  void zero_grad() { grad.setZero(); }
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  const Mat& val(Var v) const { return nodes_[v.id].val; }
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }

  Var constant(Mat v) { return push(std::move(v), false, nullptr); }

  // Differentiable leaf for inputs (used by gradient checks and hidden-state
  // gradients).
  Var input(Mat v) { return push(std::move(v), grad_enabled_, nullptr); }

  Var param(Parameter& p) {
    Var v = push(p.value, grad_enabled_ && p.trainable, nullptr);
    nodes_[v.id].param = &p;
    return v;
  }

  Var matmul(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    if (A.cols() != B.rows())
      throw ShapeMismatch("matmul " + shape_str(a) + " x " + shape_str(b));
    Var out = push(A * B, needs(a) || needs(b), nullptr);
    if (nodes_[out.id].ng) {
      set_back(out, [this, a, b, out] {
        const Mat& go = grad(out);
        if (needs(a)) nodes_[a.id].grad.noalias() += go * val(b).transpose();
        if (needs(b)) nodes_[b.id].grad.noalias() += val(a).transpose() * go;
      });
    }
    return out;
  }

  // a * b^T
  Var matmul_nt(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    if (A.cols() != B.cols())
      throw ShapeMismatch("matmul_nt " + shape_str(a) + " x " + shape_str(b));
    Var out = push(A * B.transpose(), needs(a) || needs(b), nullptr);
    if (nodes_[out.id].ng) {
      set_back(out, [this, a, b, out] {
        const Mat& go = grad(out);
        if (needs(a)) nodes_[a.id].grad.noalias() += go * val(b);
        if (needs(b)) nodes_[b.id].grad.noalias() += go.transpose() * val(a);
      });
    }
    return out;
  }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Var out = push(val(a) + val(b), needs(a) || needs(b), nullptr);
    if (nodes_[out.id].ng) {
      set_back(out, [this, a, b, out] {
        if (needs(a)) nodes_[a.id].grad += grad(out);
        if (needs(b)) nodes_[b.id].grad += grad(out);
      });
    }
    return out;
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    Var out = push(val(a) - val(b), needs(a) || needs(b), nullptr);
    if (nodes_[out.id].ng) {
      set_back(out, [this, a, b, out] {
        if (needs(a)) nodes_[a.id].grad += grad(out);
        if (needs(b)) nodes_[b.id].grad -= grad(out);
      });
    }
    return out;
  }

  Var hadamard(Var a, Var b) {
    check_same(a, b, "hadamard");
    Var out = push(val(a).cwiseProduct(val(b)), needs(a) || needs(b), nullptr);
    if (nodes_[out.id].ng) {
      set_back(out, [this, a, b, out] {
        const Mat& go = grad(out);
        if (needs(a)) nodes_[a.id].grad += go.cwiseProduct(val(b));
        if (needs(b)) nodes_[b.id].grad += go.cwiseProduct(val(a));
      });
    }
    return out;
  }

  // k*a + c, elementwise.
  Var affine(Var a, double k, double c) {
    Var out = push((val(a).array() * k + c).matrix(), needs(a), nullptr);
    if (nodes_[out.id].ng) {
      set_back(out, [this, a, out, k] { nodes_[a.id].grad += k * grad(out); });
    }
    return out;
  }

  // Broadcast-add a 1xN row vector to every row of a.
  Var add_rowvec(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    if (B.rows() != 1 || B.cols() != A.cols())
      throw ShapeMismatch("add_rowvec " + shape_str(a) + " + " + shape_str(b));
    Var out = push(A.rowwise() + B.row(0), needs(a) || needs(b), nullptr);
    if (nodes_[out.id].ng) {
      set_back(out, [this, a, b, out] {
        const Mat& go = grad(out);
        if (needs(a)) nodes_[a.id].grad += go;
        if (needs(b)) nodes_[b.id].grad += go.colwise().sum();
      });
    }
    return out;
  }

  Var add_const(Var a, const Mat& c) {
    if (c.rows() != val(a).rows() || c.cols() != val(a).cols())
      throw ShapeMismatch("add_const");
    Var out = push(val(a) + c, needs(a), nullptr);
    if (nodes_[out.id].ng) {
      set_back(out, [this, a, out] { nodes_[a.id].grad += grad(out); });
    }
    return out;
  }

  Var slice_cols(Var a, int c0, int n) {
    const Mat& A = val(a);
    if (c0 < 0 || n <= 0 || c0 + n > A.cols()) throw ShapeMismatch("slice_cols");
    Var out = push(A.middleCols(c0, n), needs(a), nullptr);
    if (nodes_[out.id].ng) {
      set_back(out, [this, a, out, c0, n] {
        nodes_[a.id].grad.middleCols(c0, n) += grad(out);
      });
    }
    return out;
  }

  Var slice_rows(Var a, int r0, int n) {
    const Mat& A = val(a);
    if (r0 < 0 || n <= 0 || r0 + n > A.rows()) throw ShapeMismatch("slice_rows");
    Var out = push(A.middleRows(r0, n), needs(a), nullptr);
    if (nodes_[out.id].ng) {
      set_back(out, [this, a, out, r0, n] {
        nodes_[a.id].grad.middleRows(r0, n) += grad(out);
      });
    }
    return out;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat_cols: empty");
    Eigen::Index rows = val(parts[0]).rows(), cols = 0;
    bool ng = false;
    for (Var p : parts) {
      if (val(p).rows() != rows) throw ShapeMismatch("concat_cols");
      cols += val(p).cols();
      ng = ng || needs(p);
    }
    Mat out(rows, cols);
    Eigen::Index c = 0;
    for (Var p : parts) {
      out.middleCols(c, val(p).cols()) = val(p);
      c += val(p).cols();
    }
    Var o = push(std::move(out), ng, nullptr);
    if (nodes_[o.id].ng) {
      set_back(o, [this, parts, o] {
        Eigen::Index c = 0;
        for (Var p : parts) {
          if (needs(p)) nodes_[p.id].grad += grad(o).middleCols(c, val(p).cols());
          c += val(p).cols();
        }
      });
    }
    return o;
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat_rows: empty");
    Eigen::Index cols = val(parts[0]).cols(), rows = 0;
    bool ng = false;
    for (Var p : parts) {
      if (val(p).cols() != cols) throw ShapeMismatch("concat_rows");
      rows += val(p).rows();
      ng = ng || needs(p);
    }
    Mat out(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
      out.middleRows(r, val(p).rows()) = val(p);
      r += val(p).rows();
    }
    Var o = push(std::move(out), ng, nullptr);
    if (nodes_[o.id].ng) {
      set_back(o, [this, parts, o] {
        Eigen::Index r = 0;
        for (Var p : parts) {
          if (needs(p)) nodes_[p.id].grad += grad(o).middleRows(r, val(p).rows());
          r += val(p).rows();
        }
      });
    }
    return o;
  }

  // Softmax along each row, numerically shifted.
  Var row_softmax(Var a) {
    const Mat& A = val(a);
    Mat out(A.rows(), A.cols());
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
      double mx = A.row(r).maxCoeff();
      Eigen::ArrayXd e = (A.row(r).array() - mx).exp();
      out.row(r) = (e / e.sum()).matrix();
    }
    Var o = push(std::move(out), needs(a), nullptr);
    if (nodes_[o.id].ng) {
      set_back(o, [this, a, o] {
        const Mat& y = val(o);
        const Mat& go = grad(o);
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
          double dot = go.row(r).dot(y.row(r));
          nodes_[a.id].grad.row(r) +=
              (y.row(r).array() * (go.row(r).array() - dot)).matrix();
        }
      });
    }
    return o;
  }

  Var sigmoid(Var a) {
    Mat out = (1.0 / (1.0 + (-val(a).array()).exp())).matrix();
    Var o = push(std::move(out), needs(a), nullptr);
    if (nodes_[o.id].ng) {
      set_back(o, [this, a, o] {
        const Mat& y = val(o);
        nodes_[a.id].grad +=
            (grad(o).array() * y.array() * (1.0 - y.array())).matrix();
      });
    }
    return o;
  }

  Var gelu(Var a) {
    auto cdf = [](double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); };
    const Mat& A = val(a);
    Mat out = A.unaryExpr([&cdf](double x) { return x * cdf(x); });
    Var o = push(std::move(out), needs(a), nullptr);
    if (nodes_[o.id].ng) {
      set_back(o, [this, a, o, cdf] {
        Mat slope = val(a).unaryExpr([&cdf](double x) {
          double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
          return cdf(x) + x * phi;
        });
        nodes_[a.id].grad += grad(o).cwiseProduct(slope);
      });
    }
    return o;
  }

  // Per-row layer norm with learnable gain/bias (each 1xN).
  Var layer_norm(Var x, Var gain, Var bias) {
    const Mat& X = val(x);
    const Mat& G = val(gain);
    const Mat& B = val(bias);
    if (G.rows() != 1 || B.rows() != 1 || G.cols() != X.cols() || B.cols() != X.cols())
      throw ShapeMismatch("layer_norm");
    const double eps = 1e-5;
    Mat xhat(X.rows(), X.cols());
    Eigen::VectorXd inv_std(X.rows());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      double mu = X.row(r).mean();
      double var = (X.row(r).array() - mu).square().mean();
      inv_std(r) = 1.0 / std::sqrt(var + eps);
      xhat.row(r) = ((X.row(r).array() - mu) * inv_std(r)).matrix();
    }
    Mat out(X.rows(), X.cols());
    for (Eigen::Index r = 0; r < X.rows(); ++r)
      out.row(r) = (xhat.row(r).array() * G.row(0).array() + B.row(0).array()).matrix();
    Var o = push(std::move(out), needs(x) || needs(gain) || needs(bias), nullptr);
    if (nodes_[o.id].ng) {
      // Keep xhat/inv_std alive for the backward pass.
      auto xh = std::make_shared<Mat>(std::move(xhat));
      auto is = std::make_shared<Eigen::VectorXd>(std::move(inv_std));
      set_back(o, [this, x, gain, bias, o, xh, is] {
        const Mat& go = grad(o);
        const Mat& G = val(gain);
        if (needs(gain))
          nodes_[gain.id].grad += (go.array() * xh->array()).colwise().sum().matrix();
        if (needs(bias)) nodes_[bias.id].grad += go.colwise().sum();
        if (needs(x)) {
          using RowArr = Eigen::Array<double, 1, Eigen::Dynamic>;
          for (Eigen::Index r = 0; r < go.rows(); ++r) {
            RowArr gy = go.row(r).array() * G.row(0).array();
            RowArr xr = xh->row(r).array();
            double m1 = gy.mean();
            double m2 = (gy * xr).mean();
            nodes_[x.id].grad.row(r) += (((gy - m1) - xr * m2) * (*is)(r)).matrix();
          }
        }
      });
    }
    return o;
  }

  // Row gather from an embedding table.
  Var embed(Var table, const std::vector<int>& ids) {
    const Mat& T = val(table);
    Mat out(static_cast<Eigen::Index>(ids.size()), T.cols());
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= T.rows()) throw ShapeMismatch("embed: id out of range");
      out.row(static_cast<Eigen::Index>(i)) = T.row(ids[i]);
    }
    Var o = push(std::move(out), needs(table), nullptr);
    if (nodes_[o.id].ng) {
      set_back(o, [this, table, o, ids] {
        for (size_t i = 0; i < ids.size(); ++i)
          nodes_[table.id].grad.row(ids[i]) += grad(o).row(static_cast<Eigen::Index>(i));
      });
    }
    return o;
  }

  Var sum(Var a) {
    Var o = push(Mat::Constant(1, 1, val(a).sum()), needs(a), nullptr);
    if (nodes_[o.id].ng) {
      set_back(o, [this, a, o] {
        nodes_[a.id].grad.array() += grad(o)(0, 0);
      });
    }
    return o;
  }

  Var mean(Var a) {
    double n = static_cast<double>(val(a).size());
    Var o = push(Mat::Constant(1, 1, val(a).sum() / n), needs(a), nullptr);
    if (nodes_[o.id].ng) {
      set_back(o, [this, a, o, n] {
        nodes_[a.id].grad.array() += grad(o)(0, 0) / n;
      });
    }
    return o;
  }

  // Scalar division of two 1x1 nodes.
  Var div11(Var a, Var b) {
    if (val(a).size() != 1 || val(b).size() != 1) throw ShapeMismatch("div11");
    double av = val(a)(0, 0), bv = val(b)(0, 0);
    Var o = push(Mat::Constant(1, 1, av / bv), needs(a) || needs(b), nullptr);
    if (nodes_[o.id].ng) {
      set_back(o, [this, a, b, o] {
        double go = grad(o)(0, 0);
        double av = val(a)(0, 0), bv = val(b)(0, 0);
        if (needs(a)) nodes_[a.id].grad(0, 0) += go / bv;
        if (needs(b)) nodes_[b.id].grad(0, 0) -= go * av / (bv * bv);
      });
    }
    return o;
  }

  // sum |a - b|  (subgradient 0 at ties)
  Var abs_sum_diff(Var a, Var b) {
    check_same(a, b, "abs_sum_diff");
    Mat d = val(a) - val(b);
    Var o = push(Mat::Constant(1, 1, d.array().abs().sum()), needs(a) || needs(b), nullptr);
    if (nodes_[o.id].ng) {
      set_back(o, [this, a, b, o] {
        double go = grad(o)(0, 0);
        Mat s = (val(a) - val(b)).array().sign().matrix() * go;
        if (needs(a)) nodes_[a.id].grad += s;
        if (needs(b)) nodes_[b.id].grad -= s;
      });
    }
    return o;
  }

  // mean |a - b|
  Var abs_mean_diff(Var a, Var b) {
    check_same(a, b, "abs_mean_diff");
    double n = static_cast<double>(val(a).size());
    Mat d = val(a) - val(b);
    Var o = push(Mat::Constant(1, 1, d.array().abs().sum() / n),
                 needs(a) || needs(b), nullptr);
    if (nodes_[o.id].ng) {
      set_back(o, [this, a, b, o, n] {
        double go = grad(o)(0, 0) / n;
        Mat s = (val(a) - val(b)).array().sign().matrix() * go;
        if (needs(a)) nodes_[a.id].grad += s;
        if (needs(b)) nodes_[b.id].grad -= s;
      });
    }
    return o;
  }

  // mean (a - b)^2
  Var sq_mean_diff(Var a, Var b) {
    check_same(a, b, "sq_mean_diff");
    double n = static_cast<double>(val(a).size());
    Mat d = val(a) - val(b);
    Var o = push(Mat::Constant(1, 1, d.array().square().sum() / n),
                 needs(a) || needs(b), nullptr);
    if (nodes_[o.id].ng) {
      set_back(o, [this, a, b, o, n] {
        double go = grad(o)(0, 0) * 2.0 / n;
        Mat s = (val(a) - val(b)) * go;
        if (needs(a)) nodes_[a.id].grad += s;
        if (needs(b)) nodes_[b.id].grad -= s;
      });
    }
    return o;
  }

  // Focal term as printed: mean over entries of -(1-p)^g * t * log(p),
  // with p clamped to [1e-7, 1-1e-7]. Optional symmetric variant adds
  // -p^g * (1-t) * log(1-p).
  Var focal(Var pred, const Mat& gt, double g, bool symmetric = false) {
    const Mat& P = val(pred);
    if (P.rows() != gt.rows() || P.cols() != gt.cols()) throw ShapeMismatch("focal");
    const double lo = 1e-7, hi = 1.0 - 1e-7;
    double n = static_cast<double>(P.size());
    double acc = 0.0;
    for (Eigen::Index i = 0; i < P.size(); ++i) {
      double p = std::min(hi, std::max(lo, P(i)));
      double t = gt(i);
      acc += -std::pow(1.0 - p, g) * t * std::log(p);
      if (symmetric) acc += -std::pow(p, g) * (1.0 - t) * std::log(1.0 - p);
    }
    Var o = push(Mat::Constant(1, 1, acc / n), needs(pred), nullptr);
    if (nodes_[o.id].ng) {
      Mat gt_copy = gt;
      set_back(o, [this, pred, o, gt_copy, g, symmetric, lo, hi, n] {
        double go = grad(o)(0, 0) / n;
        const Mat& P = val(pred);
        Mat& gr = nodes_[pred.id].grad;
        for (Eigen::Index i = 0; i < P.size(); ++i) {
          double raw = P(i);
          if (raw < lo || raw > hi) continue;  // clamped region, zero slope
          double p = raw;
          double t = gt_copy(i);
          double d = g * std::pow(1.0 - p, g - 1.0) * t * std::log(p) -
                     std::pow(1.0 - p, g) * t / p;
          if (symmetric)
            d += -g * std::pow(p, g - 1.0) * (1.0 - t) * std::log(1.0 - p) +
                 std::pow(p, g) * (1.0 - t) / (1.0 - p);
          gr(i) += go * d;
        }
      });
    }
    return o;
  }

  // Mean cross entropy of selected logit rows against target ids.
  Var cross_entropy_mean(Var logits, const std::vector<int>& rows,
                         const std::vector<int>& targets) {
    if (rows.size() != targets.size() || rows.empty())
      throw ShapeMismatch("cross_entropy_mean: rows/targets");
    const Mat& L = val(logits);
    double acc = 0.0;
    for (size_t i = 0; i < rows.size(); ++i) {
      int r = rows[i], t = targets[i];
      if (r < 0 || r >= L.rows() || t < 0 || t >= L.cols())
        throw ShapeMismatch("cross_entropy_mean: index out of range");
      double mx = L.row(r).maxCoeff();
      double lse = mx + std::log((L.row(r).array() - mx).exp().sum());
      acc += lse - L(r, t);
    }
    double n = static_cast<double>(rows.size());
    Var o = push(Mat::Constant(1, 1, acc / n), needs(logits), nullptr);
    if (nodes_[o.id].ng) {
      set_back(o, [this, logits, o, rows, targets, n] {
        double go = grad(o)(0, 0) / n;
        const Mat& L = val(logits);
        Mat& gr = nodes_[logits.id].grad;
        for (size_t i = 0; i < rows.size(); ++i) {
          int r = rows[i];
          double mx = L.row(r).maxCoeff();
          Eigen::ArrayXd e = (L.row(r).array() - mx).exp();
          Eigen::ArrayXd sm = e / e.sum();
          gr.row(r) += (sm * go).matrix().transpose();
          gr(r, targets[i]) -= go;
        }
      });
    }
    return o;
  }

  void backward(Var loss) {
    if (val(loss).size() != 1) throw ShapeMismatch("backward: loss must be 1x1");
    if (!nodes_[loss.id].ng) return;
    nodes_[loss.id].grad(0, 0) = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      if (nodes_[i].ng && nodes_[i].back) nodes_[i].back();
    }
    // Flush leaf gradients into their Parameters.
    for (auto& n : nodes_) {
      if (n.param && n.ng) n.param->grad += n.grad;
    }
  }

  bool grad_enabled() const { return grad_enabled_; }

 private:
  struct Node {
    Mat val;
    Mat grad;
    std::function<void()> back;
    bool ng = false;
    Parameter* param = nullptr;
  };

  bool needs(Var v) const { return nodes_[v.id].ng; }

  std::string shape_str(Var v) const {
    return std::to_string(val(v).rows()) + "x" + std::to_string(val(v).cols());
  }

  void check_same(Var a, Var b, const char* op) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw ShapeMismatch(std::string(op) + " " + shape_str(a) + " vs " + shape_str(b));
  }

  Var push(Mat v, bool ng, Parameter* p) {
    Node n;
    n.ng = ng;
    n.param = p;
    if (ng) n.grad = Mat::Zero(v.rows(), v.cols());
    n.val = std::move(v);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void set_back(Var v, std::function<void()> f) { nodes_[v.id].back = std::move(f); }

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

}  // namespace covt::ad
