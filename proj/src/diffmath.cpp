#include "botarena/diffmath.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace botarena::diffmath {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

CMap cmap(const std::vector<double>& v, int r, int c) { return CMap(v.data(), r, c); }
MMap mmap(std::vector<double>& v, int r, int c) { return MMap(v.data(), r, c); }

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

int Var::rows() const {
  if (!tape_) throw Error("Var: use of a default-constructed handle");
  return tape_->node(idx_).rows;
}

int Var::cols() const {
  if (!tape_) throw Error("Var: use of a default-constructed handle");
  return tape_->node(idx_).cols;
}

const std::vector<double>& Var::value() const {
  if (!tape_) throw Error("Var: use of a default-constructed handle");
  return tape_->node(idx_).val;
}

const std::vector<double>& Var::grad() const {
  if (!tape_) throw Error("Var: use of a default-constructed handle");
  const auto& n = tape_->node(idx_);
  if (!n.needs_grad) throw Error("Var: gradient requested for a non-differentiable node");
  return n.grad;
}

double Var::scalar_value() const {
  if (rows() != 1 || cols() != 1) throw Error("Var: scalar_value on a non-1x1 node");
  return value()[0];
}

Var Tape::make_node(int rows, int cols, bool needs_grad, const char* op) {
  if (rows <= 0 || cols <= 0) {
    throw Error(std::string(op) + ": non-positive shape");
  }
  if (backward_done_) {
    throw Error(std::string(op) + ": tape already consumed by backward");
  }
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.val.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  n.needs_grad = needs_grad;
  if (needs_grad) n.grad.assign(n.val.size(), 0.0);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::check_same_tape(Var v, const char* op) const {
  if (!v.defined() || v.tape_ != this) {
    throw Error(std::string(op) + ": operand from another (or no) tape");
  }
}

void Tape::check_finite(std::size_t idx, const char* op) const {
  for (double x : nodes_[idx].val) {
    if (!std::isfinite(x)) {
      throw Error(std::string(op) + ": non-finite value produced");
    }
  }
}

Var Tape::input(int rows, int cols, std::span<const double> values, bool requires_grad) {
  if (values.size() != static_cast<std::size_t>(rows) * cols) {
    throw Error("input: value count does not match shape");
  }
  Var v = make_node(rows, cols, requires_grad, "input");
  std::copy(values.begin(), values.end(), node(v.idx_).val.begin());
  check_finite(v.idx_, "input");
  return v;
}

Var Tape::constant(int rows, int cols, std::span<const double> values) {
  return input(rows, cols, values, false);
}

Var Tape::scalar(double v) {
  double tmp[1] = {v};
  return constant(1, 1, tmp);
}

Var Tape::matmul(Var a, Var b) {
  check_same_tape(a, "matmul");
  check_same_tape(b, "matmul");
  if (a.cols() != b.rows()) {
    throw Error("matmul: inner dimensions disagree (" + std::to_string(a.cols()) + " vs " +
                std::to_string(b.rows()) + ")");
  }
  int n = a.rows(), k = a.cols(), m = b.cols();
  bool ng = node(a.idx_).needs_grad || node(b.idx_).needs_grad;
  Var out = make_node(n, m, ng, "matmul");
  mmap(node(out.idx_).val, n, m).noalias() =
      cmap(node(a.idx_).val, n, k) * cmap(node(b.idx_).val, k, m);
  check_finite(out.idx_, "matmul");
  if (ng) {
    std::size_t ai = a.idx_, bi = b.idx_, oi = out.idx_;
    node(oi).back = [this, ai, bi, oi, n, k, m]() {
      CMap g(nodes_[oi].grad.data(), n, m);
      if (nodes_[ai].needs_grad) {
        mmap(nodes_[ai].grad, n, k).noalias() += g * cmap(nodes_[bi].val, k, m).transpose();
      }
      if (nodes_[bi].needs_grad) {
        mmap(nodes_[bi].grad, k, m).noalias() += cmap(nodes_[ai].val, n, k).transpose() * g;
      }
    };
  }
  return out;
}

Var Tape::add(Var a, Var b) {
  check_same_tape(a, "add");
  check_same_tape(b, "add");
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error("add: shape mismatch");
  }
  bool ng = node(a.idx_).needs_grad || node(b.idx_).needs_grad;
  Var out = make_node(a.rows(), a.cols(), ng, "add");
  const auto& av = node(a.idx_).val;
  const auto& bv = node(b.idx_).val;
  auto& ov = node(out.idx_).val;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  check_finite(out.idx_, "add");
  if (ng) {
    std::size_t ai = a.idx_, bi = b.idx_, oi = out.idx_;
    node(oi).back = [this, ai, bi, oi]() {
      const auto& g = nodes_[oi].grad;
      if (nodes_[ai].needs_grad) {
        auto& ga = nodes_[ai].grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (nodes_[bi].needs_grad) {
        auto& gb = nodes_[bi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    };
  }
  return out;
}

Var Tape::add_rowvec(Var m, Var row) {
  check_same_tape(m, "add_rowvec");
  check_same_tape(row, "add_rowvec");
  if (row.rows() != 1 || row.cols() != m.cols()) {
    throw Error("add_rowvec: row must be 1 x cols(m)");
  }
  bool ng = node(m.idx_).needs_grad || node(row.idx_).needs_grad;
  Var out = make_node(m.rows(), m.cols(), ng, "add_rowvec");
  const auto& mv = node(m.idx_).val;
  const auto& rv = node(row.idx_).val;
  auto& ov = node(out.idx_).val;
  int c = m.cols();
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < c; ++j) {
      ov[static_cast<std::size_t>(i) * c + j] = mv[static_cast<std::size_t>(i) * c + j] + rv[j];
    }
  }
  check_finite(out.idx_, "add_rowvec");
  if (ng) {
    std::size_t mi = m.idx_, ri = row.idx_, oi = out.idx_;
    int rcount = m.rows();
    node(oi).back = [this, mi, ri, oi, rcount, c]() {
      const auto& g = nodes_[oi].grad;
      if (nodes_[mi].needs_grad) {
        auto& gm = nodes_[mi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
      }
      if (nodes_[ri].needs_grad) {
        auto& gr = nodes_[ri].grad;
        for (int i = 0; i < rcount; ++i) {
          for (int j = 0; j < c; ++j) gr[j] += g[static_cast<std::size_t>(i) * c + j];
        }
      }
    };
  }
  return out;
}

Var Tape::sub(Var a, Var b) {
  check_same_tape(a, "sub");
  check_same_tape(b, "sub");
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error("sub: shape mismatch");
  }
  bool ng = node(a.idx_).needs_grad || node(b.idx_).needs_grad;
  Var out = make_node(a.rows(), a.cols(), ng, "sub");
  const auto& av = node(a.idx_).val;
  const auto& bv = node(b.idx_).val;
  auto& ov = node(out.idx_).val;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  check_finite(out.idx_, "sub");
  if (ng) {
    std::size_t ai = a.idx_, bi = b.idx_, oi = out.idx_;
    node(oi).back = [this, ai, bi, oi]() {
      const auto& g = nodes_[oi].grad;
      if (nodes_[ai].needs_grad) {
        auto& ga = nodes_[ai].grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (nodes_[bi].needs_grad) {
        auto& gb = nodes_[bi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    };
  }
  return out;
}

Var Tape::mul(Var a, Var b) {
  check_same_tape(a, "mul");
  check_same_tape(b, "mul");
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error("mul: shape mismatch");
  }
  bool ng = node(a.idx_).needs_grad || node(b.idx_).needs_grad;
  Var out = make_node(a.rows(), a.cols(), ng, "mul");
  const auto& av = node(a.idx_).val;
  const auto& bv = node(b.idx_).val;
  auto& ov = node(out.idx_).val;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  check_finite(out.idx_, "mul");
  if (ng) {
    std::size_t ai = a.idx_, bi = b.idx_, oi = out.idx_;
    node(oi).back = [this, ai, bi, oi]() {
      const auto& g = nodes_[oi].grad;
      if (nodes_[ai].needs_grad) {
        auto& ga = nodes_[ai].grad;
        const auto& bv2 = nodes_[bi].val;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
      }
      if (nodes_[bi].needs_grad) {
        auto& gb = nodes_[bi].grad;
        const auto& av2 = nodes_[ai].val;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
      }
    };
  }
  return out;
}

Var Tape::scale(Var a, double cfac) {
  check_same_tape(a, "scale");
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(a.rows(), a.cols(), ng, "scale");
  const auto& av = node(a.idx_).val;
  auto& ov = node(out.idx_).val;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = cfac * av[i];
  check_finite(out.idx_, "scale");
  if (ng) {
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi, cfac]() {
      const auto& g = nodes_[oi].grad;
      auto& ga = nodes_[ai].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += cfac * g[i];
    };
  }
  return out;
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw Error("concat_cols: no operands");
  int r = parts[0].rows();
  int total = 0;
  bool ng = false;
  for (Var p : parts) {
    check_same_tape(p, "concat_cols");
    if (p.rows() != r) throw Error("concat_cols: row counts disagree");
    total += p.cols();
    ng = ng || node(p.idx_).needs_grad;
  }
  Var out = make_node(r, total, ng, "concat_cols");
  auto& ov = node(out.idx_).val;
  int off = 0;
  for (Var p : parts) {
    const auto& pv = node(p.idx_).val;
    int pc = p.cols();
    for (int i = 0; i < r; ++i) {
      std::copy(pv.begin() + static_cast<std::ptrdiff_t>(i) * pc,
                pv.begin() + static_cast<std::ptrdiff_t>(i + 1) * pc,
                ov.begin() + static_cast<std::ptrdiff_t>(i) * total + off);
    }
    off += pc;
  }
  check_finite(out.idx_, "concat_cols");
  if (ng) {
    std::vector<std::size_t> idxs;
    std::vector<int> widths;
    for (Var p : parts) {
      idxs.push_back(p.idx_);
      widths.push_back(p.cols());
    }
    std::size_t oi = out.idx_;
    node(oi).back = [this, idxs, widths, oi, r, total]() {
      const auto& g = nodes_[oi].grad;
      int off2 = 0;
      for (std::size_t k = 0; k < idxs.size(); ++k) {
        int pc = widths[k];
        if (nodes_[idxs[k]].needs_grad) {
          auto& gp = nodes_[idxs[k]].grad;
          for (int i = 0; i < r; ++i) {
            for (int j = 0; j < pc; ++j) {
              gp[static_cast<std::size_t>(i) * pc + j] +=
                  g[static_cast<std::size_t>(i) * total + off2 + j];
            }
          }
        }
        off2 += pc;
      }
    };
  }
  return out;
}

Var Tape::leaky_relu(Var a, double negative_slope) {
  check_same_tape(a, "leaky_relu");
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(a.rows(), a.cols(), ng, "leaky_relu");
  const auto& av = node(a.idx_).val;
  auto& ov = node(out.idx_).val;
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = av[i] >= 0.0 ? av[i] : negative_slope * av[i];
  }
  check_finite(out.idx_, "leaky_relu");
  if (ng) {
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi, negative_slope]() {
      const auto& g = nodes_[oi].grad;
      const auto& av2 = nodes_[ai].val;
      auto& ga = nodes_[ai].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] * (av2[i] >= 0.0 ? 1.0 : negative_slope);
      }
    };
  }
  return out;
}

Var Tape::sigmoid(Var a) {
  check_same_tape(a, "sigmoid");
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(a.rows(), a.cols(), ng, "sigmoid");
  const auto& av = node(a.idx_).val;
  auto& ov = node(out.idx_).val;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = stable_sigmoid(av[i]);
  check_finite(out.idx_, "sigmoid");
  if (ng) {
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi]() {
      const auto& g = nodes_[oi].grad;
      const auto& s = nodes_[oi].val;
      auto& ga = nodes_[ai].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s[i] * (1.0 - s[i]);
    };
  }
  return out;
}

Var Tape::tanh(Var a) {
  check_same_tape(a, "tanh");
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(a.rows(), a.cols(), ng, "tanh");
  const auto& av = node(a.idx_).val;
  auto& ov = node(out.idx_).val;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(av[i]);
  check_finite(out.idx_, "tanh");
  if (ng) {
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi]() {
      const auto& g = nodes_[oi].grad;
      const auto& t = nodes_[oi].val;
      auto& ga = nodes_[ai].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - t[i] * t[i]);
    };
  }
  return out;
}

Var Tape::log(Var a) {
  check_same_tape(a, "log");
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(a.rows(), a.cols(), ng, "log");
  const auto& av = node(a.idx_).val;
  auto& ov = node(out.idx_).val;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(av[i]);
  check_finite(out.idx_, "log");
  if (ng) {
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi]() {
      const auto& g = nodes_[oi].grad;
      const auto& av2 = nodes_[ai].val;
      auto& ga = nodes_[ai].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av2[i];
    };
  }
  return out;
}

Var Tape::log_sigmoid(Var a) {
  check_same_tape(a, "log_sigmoid");
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(a.rows(), a.cols(), ng, "log_sigmoid");
  const auto& av = node(a.idx_).val;
  auto& ov = node(out.idx_).val;
  for (std::size_t i = 0; i < ov.size(); ++i) {
    double x = av[i];
    ov[i] = x < 0.0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x));
  }
  check_finite(out.idx_, "log_sigmoid");
  if (ng) {
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi]() {
      const auto& g = nodes_[oi].grad;
      const auto& av2 = nodes_[ai].val;
      auto& ga = nodes_[ai].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * stable_sigmoid(-av2[i]);
    };
  }
  return out;
}

Var Tape::softmax_rows(Var a) {
  check_same_tape(a, "softmax_rows");
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(a.rows(), a.cols(), ng, "softmax_rows");
  const auto& av = node(a.idx_).val;
  auto& ov = node(out.idx_).val;
  int r = a.rows(), c = a.cols();
  for (int i = 0; i < r; ++i) {
    const double* x = av.data() + static_cast<std::ptrdiff_t>(i) * c;
    double* y = ov.data() + static_cast<std::ptrdiff_t>(i) * c;
    double mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < c; ++j) y[j] /= z;
  }
  check_finite(out.idx_, "softmax_rows");
  if (ng) {
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi, r, c]() {
      const auto& g = nodes_[oi].grad;
      const auto& s = nodes_[oi].val;
      auto& ga = nodes_[ai].grad;
      for (int i = 0; i < r; ++i) {
        const double* gi = g.data() + static_cast<std::ptrdiff_t>(i) * c;
        const double* si = s.data() + static_cast<std::ptrdiff_t>(i) * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += gi[j] * si[j];
        double* gai = ga.data() + static_cast<std::ptrdiff_t>(i) * c;
        for (int j = 0; j < c; ++j) gai[j] += si[j] * (gi[j] - dot);
      }
    };
  }
  return out;
}

Var Tape::log_softmax_rows(Var a) {
  check_same_tape(a, "log_softmax_rows");
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(a.rows(), a.cols(), ng, "log_softmax_rows");
  const auto& av = node(a.idx_).val;
  auto& ov = node(out.idx_).val;
  int r = a.rows(), c = a.cols();
  for (int i = 0; i < r; ++i) {
    const double* x = av.data() + static_cast<std::ptrdiff_t>(i) * c;
    double* y = ov.data() + static_cast<std::ptrdiff_t>(i) * c;
    double mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    double lse = mx + std::log(z);
    for (int j = 0; j < c; ++j) y[j] = x[j] - lse;
  }
  check_finite(out.idx_, "log_softmax_rows");
  if (ng) {
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi, r, c]() {
      const auto& g = nodes_[oi].grad;
      const auto& lsm = nodes_[oi].val;
      auto& ga = nodes_[ai].grad;
      for (int i = 0; i < r; ++i) {
        const double* gi = g.data() + static_cast<std::ptrdiff_t>(i) * c;
        const double* yi = lsm.data() + static_cast<std::ptrdiff_t>(i) * c;
        double gsum = 0.0;
        for (int j = 0; j < c; ++j) gsum += gi[j];
        double* gai = ga.data() + static_cast<std::ptrdiff_t>(i) * c;
        for (int j = 0; j < c; ++j) gai[j] += gi[j] - std::exp(yi[j]) * gsum;
      }
    };
  }
  return out;
}

Var Tape::sum_all(Var a) {
  check_same_tape(a, "sum_all");
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(1, 1, ng, "sum_all");
  const auto& av = node(a.idx_).val;
  double s = 0.0;
  for (double x : av) s += x;
  node(out.idx_).val[0] = s;
  check_finite(out.idx_, "sum_all");
  if (ng) {
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi]() {
      double g = nodes_[oi].grad[0];
      auto& ga = nodes_[ai].grad;
      for (double& x : ga) x += g;
    };
  }
  return out;
}

Var Tape::mean_all(Var a) {
  check_same_tape(a, "mean_all");
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(1, 1, ng, "mean_all");
  const auto& av = node(a.idx_).val;
  double s = 0.0;
  for (double x : av) s += x;
  double inv = 1.0 / static_cast<double>(av.size());
  node(out.idx_).val[0] = s * inv;
  check_finite(out.idx_, "mean_all");
  if (ng) {
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi, inv]() {
      double g = nodes_[oi].grad[0] * inv;
      auto& ga = nodes_[ai].grad;
      for (double& x : ga) x += g;
    };
  }
  return out;
}

Var Tape::dropout(Var a, std::span<const double> mask, double p) {
  check_same_tape(a, "dropout");
  if (p < 0.0 || p >= 1.0) throw Error("dropout: p must be in [0, 1)");
  if (mask.size() != a.size()) throw Error("dropout: mask size mismatch");
  for (double m : mask) {
    if (m != 0.0 && m != 1.0) throw Error("dropout: mask entries must be 0 or 1");
  }
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(a.rows(), a.cols(), ng, "dropout");
  const auto& av = node(a.idx_).val;
  auto& ov = node(out.idx_).val;
  double inv = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * mask[i] * inv;
  check_finite(out.idx_, "dropout");
  if (ng) {
    std::vector<double> mcopy(mask.begin(), mask.end());
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi, mcopy = std::move(mcopy), inv]() {
      const auto& g = nodes_[oi].grad;
      auto& ga = nodes_[ai].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mcopy[i] * inv;
    };
  }
  return out;
}

Var Tape::gather_rows(Var a, std::span<const int> row_index) {
  check_same_tape(a, "gather_rows");
  if (row_index.empty()) throw Error("gather_rows: empty index");
  for (int r : row_index) {
    if (r < 0 || r >= a.rows()) throw Error("gather_rows: index out of range");
  }
  int c = a.cols();
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(static_cast<int>(row_index.size()), c, ng, "gather_rows");
  const auto& av = node(a.idx_).val;
  auto& ov = node(out.idx_).val;
  for (std::size_t i = 0; i < row_index.size(); ++i) {
    std::copy(av.begin() + static_cast<std::ptrdiff_t>(row_index[i]) * c,
              av.begin() + static_cast<std::ptrdiff_t>(row_index[i] + 1) * c,
              ov.begin() + static_cast<std::ptrdiff_t>(i) * c);
  }
  check_finite(out.idx_, "gather_rows");
  if (ng) {
    std::vector<int> idx(row_index.begin(), row_index.end());
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi, idx = std::move(idx), c]() {
      const auto& g = nodes_[oi].grad;
      auto& ga = nodes_[ai].grad;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (int j = 0; j < c; ++j) {
          ga[static_cast<std::size_t>(idx[i]) * c + j] += g[i * c + j];
        }
      }
    };
  }
  return out;
}

Var Tape::pick_per_row(Var a, std::span<const int> col_index) {
  check_same_tape(a, "pick_per_row");
  if (col_index.size() != static_cast<std::size_t>(a.rows())) {
    throw Error("pick_per_row: need one column index per row");
  }
  for (int cidx : col_index) {
    if (cidx < 0 || cidx >= a.cols()) throw Error("pick_per_row: index out of range");
  }
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(a.rows(), 1, ng, "pick_per_row");
  const auto& av = node(a.idx_).val;
  auto& ov = node(out.idx_).val;
  int c = a.cols();
  for (int i = 0; i < a.rows(); ++i) {
    ov[i] = av[static_cast<std::size_t>(i) * c + col_index[i]];
  }
  check_finite(out.idx_, "pick_per_row");
  if (ng) {
    std::vector<int> idx(col_index.begin(), col_index.end());
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi, idx = std::move(idx), c]() {
      const auto& g = nodes_[oi].grad;
      auto& ga = nodes_[ai].grad;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        ga[i * c + idx[i]] += g[i];
      }
    };
  }
  return out;
}

Var Tape::segment_sum(Var a, std::span<const int> segment_of_row, int n_segments) {
  check_same_tape(a, "segment_sum");
  if (a.cols() != 1) throw Error("segment_sum: input must be n x 1");
  if (segment_of_row.size() != static_cast<std::size_t>(a.rows())) {
    throw Error("segment_sum: need one segment id per row");
  }
  if (n_segments <= 0) throw Error("segment_sum: n_segments must be positive");
  for (int s : segment_of_row) {
    if (s < 0 || s >= n_segments) throw Error("segment_sum: segment id out of range");
  }
  bool ng = node(a.idx_).needs_grad;
  Var out = make_node(n_segments, 1, ng, "segment_sum");
  const auto& av = node(a.idx_).val;
  auto& ov = node(out.idx_).val;
  for (std::size_t i = 0; i < segment_of_row.size(); ++i) ov[segment_of_row[i]] += av[i];
  check_finite(out.idx_, "segment_sum");
  if (ng) {
    std::vector<int> seg(segment_of_row.begin(), segment_of_row.end());
    std::size_t ai = a.idx_, oi = out.idx_;
    node(oi).back = [this, ai, oi, seg = std::move(seg)]() {
      const auto& g = nodes_[oi].grad;
      auto& ga = nodes_[ai].grad;
      for (std::size_t i = 0; i < seg.size(); ++i) ga[i] += g[seg[i]];
    };
  }
  return out;
}

Var Tape::neighbor_mean(Var h, const std::vector<std::vector<int>>& nbrs) {
  check_same_tape(h, "neighbor_mean");
  for (const auto& row : nbrs) {
    for (int u : row) {
      if (u < 0 || u >= h.rows()) throw Error("neighbor_mean: neighbor index out of range");
    }
  }
  int c = h.cols();
  bool ng = node(h.idx_).needs_grad;
  Var out = make_node(static_cast<int>(nbrs.size()), c, ng, "neighbor_mean");
  const auto& hv = node(h.idx_).val;
  auto& ov = node(out.idx_).val;
  for (std::size_t v = 0; v < nbrs.size(); ++v) {
    if (nbrs[v].empty()) continue;
    double inv = 1.0 / static_cast<double>(nbrs[v].size());
    double* yo = ov.data() + static_cast<std::ptrdiff_t>(v) * c;
    for (int u : nbrs[v]) {
      const double* xu = hv.data() + static_cast<std::ptrdiff_t>(u) * c;
      for (int j = 0; j < c; ++j) yo[j] += xu[j];
    }
    for (int j = 0; j < c; ++j) yo[j] *= inv;
  }
  check_finite(out.idx_, "neighbor_mean");
  if (ng) {
    std::size_t hi = h.idx_, oi = out.idx_;
    // Copy the adjacency so the tape owns it for the backward pass.
    std::vector<std::vector<int>> owned(nbrs);
    node(oi).back = [this, hi, oi, owned = std::move(owned), c]() {
      const auto& g = nodes_[oi].grad;
      auto& gh = nodes_[hi].grad;
      for (std::size_t v = 0; v < owned.size(); ++v) {
        if (owned[v].empty()) continue;
        double inv = 1.0 / static_cast<double>(owned[v].size());
        const double* gv = g.data() + static_cast<std::ptrdiff_t>(v) * c;
        for (int u : owned[v]) {
          double* gu = gh.data() + static_cast<std::ptrdiff_t>(u) * c;
          for (int j = 0; j < c; ++j) gu[j] += gv[j] * inv;
        }
      }
    };
  }
  return out;
}

void Tape::backward(Var loss) {
  check_same_tape(loss, "backward");
  if (backward_done_) throw Error("backward: tape already consumed (one backward per recording)");
  if (loss.rows() != 1 || loss.cols() != 1) throw Error("backward: loss must be 1x1");
  if (!node(loss.idx_).needs_grad) {
    throw Error("backward: loss does not depend on any differentiable input");
  }
  backward_done_ = true;
  node(loss.idx_).grad[0] = 1.0;
  for (std::size_t i = loss.idx_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.needs_grad && n.back) n.back();
  }
}

void Adam::step(const std::string& name, std::span<double> param, std::span<const double> grad) {
  if (param.size() != grad.size()) throw Error("adam: param/grad size mismatch for " + name);
  Slot* slot = nullptr;
  for (auto& [n, s] : slots_) {
    if (n == name) {
      slot = &s;
      break;
    }
  }
  if (slot == nullptr) {
    slots_.emplace_back(name, Slot{});
    slot = &slots_.back().second;
    slot->m.assign(param.size(), 0.0);
    slot->v.assign(param.size(), 0.0);
  }
  if (slot->m.size() != param.size()) {
    throw Error("adam: parameter '" + name + "' changed size between steps");
  }
  slot->t += 1;
  double b1t = 1.0 - std::pow(cfg_.beta1, static_cast<double>(slot->t));
  double b2t = 1.0 - std::pow(cfg_.beta2, static_cast<double>(slot->t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    double g = grad[i];
    slot->m[i] = cfg_.beta1 * slot->m[i] + (1.0 - cfg_.beta1) * g;
    slot->v[i] = cfg_.beta2 * slot->v[i] + (1.0 - cfg_.beta2) * g * g;
    double mhat = slot->m[i] / b1t;
    double vhat = slot->v[i] / b2t;
    param[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * param[i]);
  }
}

}  // namespace botarena::diffmath
