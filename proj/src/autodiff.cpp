#include "foresight/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "foresight/errors.hpp"

namespace foresight::ad {

int AttentionPlan::n_groups() const {
  return static_cast<int>(use_token_masks ? token_masks.size() : block_masks.size());
}

std::shared_ptr<AttentionPlan> make_block_plan(const BlockGrid& grid, std::vector<BlockMask> masks, int n_heads) {
  if (masks.empty() || n_heads < 1 || n_heads % static_cast<int>(masks.size()) != 0) {
    throw PreconditionError("attention plan: heads must split evenly across mask groups");
  }
  auto plan = std::make_shared<AttentionPlan>();
  plan->n_heads = n_heads;
  plan->grid = &grid;
  const auto n = static_cast<std::size_t>(grid.padded_len());
  const auto bs = static_cast<std::uint32_t>(grid.block_size);
  for (const auto& m : masks) {
    if (m.n_blocks() != grid.n_blocks()) {
      throw PreconditionError("attention plan: mask block count differs from the grid");
    }
    std::vector<std::vector<std::uint32_t>> keys(n);
    for (int qb = 0; qb < grid.n_blocks(); ++qb) {
      std::vector<std::uint32_t> row_keys;
      for (auto kb : m.row(qb)) {
        const auto& blk = grid.blocks[kb];
        for (int s = 0; s < blk.valid_tokens; ++s) {
          row_keys.push_back(kb * bs + static_cast<std::uint32_t>(s));
        }
      }
      const auto& qblk = grid.blocks[static_cast<std::size_t>(qb)];
      for (int s = 0; s < qblk.valid_tokens; ++s) {
        keys[static_cast<std::size_t>(qb) * bs + static_cast<std::size_t>(s)] = row_keys;
      }
    }
    plan->keys.push_back(std::move(keys));
  }
  plan->block_masks = std::move(masks);
  return plan;
}

std::shared_ptr<AttentionPlan> make_token_plan(std::vector<TokenMask> masks, int n_heads) {
  if (masks.empty() || n_heads < 1 || n_heads % static_cast<int>(masks.size()) != 0) {
    throw PreconditionError("attention plan: heads must split evenly across mask groups");
  }
  auto plan = std::make_shared<AttentionPlan>();
  plan->n_heads = n_heads;
  plan->use_token_masks = true;
  for (const auto& m : masks) {
    std::vector<std::vector<std::uint32_t>> keys(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
      for (std::size_t j = 0; j < m.size(); ++j) {
        if (m(i, j)) {
          keys[i].push_back(static_cast<std::uint32_t>(j));
        }
      }
    }
    plan->keys.push_back(std::move(keys));
  }
  plan->token_masks = std::move(masks);
  return plan;
}

void gemm_acc(const Matrix& a, bool ta, const Matrix& b, bool tb, Matrix& c) {
  const std::size_t m = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t kb = tb ? b.cols() : b.rows();
  const std::size_t n = tb ? b.rows() : b.cols();
  if (k != kb || c.rows() != m || c.cols() != n) {
    throw PreconditionError("gemm: incompatible shapes");
  }
  double* cd = c.data();
  const double* ad = a.data();
  const double* bd = b.data();
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = cd + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ad[i * k + p];
        if (av == 0.0) {
          continue;
        }
        const double* brow = bd + p * n;
        for (std::size_t j = 0; j < n; ++j) {
          crow[j] += av * brow[j];
        }
      }
    }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = ad + p * m;
      const double* brow = bd + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = arow[i];
        if (av == 0.0) {
          continue;
        }
        double* crow = cd + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          crow[j] += av * brow[j];
        }
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = ad + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = bd + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
          s += arow[p] * brow[p];
        }
        cd[i * n + j] += s;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
          s += ad[p * m + i] * bd[j * k + p];
        }
        cd[i * n + j] += s;
      }
    }
  }
}

Var Tape::push(Matrix value, bool requires_grad, std::function<void(Tape&)> backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) {
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

Matrix& Tape::grad_of(Var v) {
  auto& node = nodes_[v];
  if (node.grad.empty() && !node.value.empty()) {
    node.grad = Matrix(node.value.rows(), node.value.cols());
  }
  return node.grad;
}

Var Tape::constant(Matrix value) { return push(std::move(value), false); }

Var Tape::parameter(const Matrix& value, Matrix* grad_sink) {
  const Var id = push(value, grad_sink != nullptr);
  nodes_[id].grad_sink = grad_sink;
  return id;
}

void Tape::backward(Var out) {
  if (nodes_[out].value.size() != 1) {
    throw PreconditionError("backward: output must be a scalar");
  }
  if (!nodes_[out].requires_grad) {
    return;
  }
  grad_of(out).fill(1.0);
  for (std::size_t i = out + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty()) {
      continue;
    }
    if (node.backward) {
      node.backward(*this);
    }
    if (node.grad_sink != nullptr) {
      Matrix& sink = *node.grad_sink;
      if (!sink.same_shape(node.grad)) {
        throw PreconditionError("backward: gradient sink shape mismatch");
      }
      for (std::size_t j = 0; j < sink.size(); ++j) {
        sink.data()[j] += node.grad.data()[j];
      }
    }
  }
}

Var Tape::matmul(Var a, Var b) {
  const Matrix& av = value(a);
  const Matrix& bv = value(b);
  Matrix out(av.rows(), bv.cols());
  gemm_acc(av, false, bv, false, out);
  return push(std::move(out), requires_grad(a) || requires_grad(b), [a, b, self = nodes_.size()](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) {
      gemm_acc(g, false, t.value(b), true, t.grad_of(a));
    }
    if (t.requires_grad(b)) {
      gemm_acc(t.value(a), true, g, false, t.grad_of(b));
    }
  });
}

Var Tape::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  Matrix out = value(a);
  const Matrix& bv = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data()[i] += bv.data()[i];
  }
  return push(std::move(out), requires_grad(a) || requires_grad(b), [a, b, self = nodes_.size()](Tape& t) {
    for (Var p : {a, b}) {
      if (!t.requires_grad(p)) {
        continue;
      }
      const Matrix& g = t.nodes_[self].grad;
      Matrix& gp = t.grad_of(p);
      for (std::size_t i = 0; i < g.size(); ++i) {
        gp.data()[i] += g.data()[i];
      }
    }
  });
}

Var Tape::add_row(Var a, Var row) {
  const Matrix& rv = value(row);
  Matrix out = value(a);
  if (rv.rows() != 1 || rv.cols() != out.cols()) {
    throw PreconditionError("add_row: bias must be 1 x cols");
  }
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      out(r, c) += rv(0, c);
    }
  }
  return push(std::move(out), requires_grad(a) || requires_grad(row), [a, row, self = nodes_.size()](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) {
      Matrix& ga = t.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.data()[i] += g.data()[i];
      }
    }
    if (t.requires_grad(row)) {
      Matrix& gr = t.grad_of(row);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < g.cols(); ++c) {
          gr(0, c) += g(r, c);
        }
      }
    }
  });
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = value(x);
  const Matrix& gv = value(gamma);
  const Matrix& bv = value(beta);
  const std::size_t n = xv.rows();
  const std::size_t d = xv.cols();
  if (gv.rows() != 1 || gv.cols() != d || !bv.same_shape(gv)) {
    throw PreconditionError("layer_norm: gain and bias must be 1 x cols");
  }
  auto xhat = std::make_shared<Matrix>(n, d);
  auto rstd = std::make_shared<std::vector<double>>(n);
  Matrix out(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      mu += xv(r, c);
    }
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double e = xv(r, c) - mu;
      var += e * e;
    }
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (xv(r, c) - mu) * rs;
      (*xhat)(r, c) = h;
      out(r, c) = h * gv(0, c) + bv(0, c);
    }
  }
  const bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
  return push(std::move(out), rg, [x, gamma, beta, xhat, rstd, self = nodes_.size()](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& gv = t.value(gamma);
    const std::size_t n = g.rows();
    const std::size_t d = g.cols();
    if (t.requires_grad(gamma) || t.requires_grad(beta)) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          if (t.requires_grad(gamma)) {
            t.grad_of(gamma)(0, c) += g(r, c) * (*xhat)(r, c);
          }
          if (t.requires_grad(beta)) {
            t.grad_of(beta)(0, c) += g(r, c);
          }
        }
      }
    }
    if (t.requires_grad(x)) {
      Matrix& gx = t.grad_of(x);
      std::vector<double> dxh(d);
      for (std::size_t r = 0; r < n; ++r) {
        double mean_d = 0.0;
        double mean_dx = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          dxh[c] = g(r, c) * gv(0, c);
          mean_d += dxh[c];
          mean_dx += dxh[c] * (*xhat)(r, c);
        }
        mean_d /= static_cast<double>(d);
        mean_dx /= static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c) {
          gx(r, c) += (*rstd)[r] * (dxh[c] - mean_d - (*xhat)(r, c) * mean_dx);
        }
      }
    }
  });
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var Tape::gelu(Var x) {
  Matrix out = value(x);
  for (double& v : out.values()) {
    v = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return push(std::move(out), requires_grad(x), [x, self = nodes_.size()](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& xv = t.value(x);
    Matrix& gx = t.grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv.data()[i];
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dudx = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      gx.data()[i] += g.data()[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dudx);
    }
  });
}

Var Tape::gather_rows(Var x, std::vector<std::uint32_t> rows) {
  const Matrix& xv = value(x);
  Matrix out(rows.size(), xv.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= xv.rows()) {
      throw PreconditionError("gather_rows: index out of range");
    }
    std::copy_n(xv.row(rows[r]).data(), xv.cols(), out.row(r).data());
  }
  return push(std::move(out), requires_grad(x), [x, rows = std::move(rows), self = nodes_.size()](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& gx = t.grad_of(x);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto dst = gx.row(rows[r]);
      auto src = g.row(r);
      for (std::size_t c = 0; c < src.size(); ++c) {
        dst[c] += src[c];
      }
    }
  });
}

Var Tape::scatter_rows(Var x, std::vector<std::uint32_t> rows, std::size_t n_rows) {
  const Matrix& xv = value(x);
  if (rows.size() != xv.rows()) {
    throw PreconditionError("scatter_rows: one destination per source row required");
  }
  Matrix out(n_rows, xv.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n_rows) {
      throw PreconditionError("scatter_rows: index out of range");
    }
    auto dst = out.row(rows[r]);
    auto src = xv.row(r);
    for (std::size_t c = 0; c < src.size(); ++c) {
      dst[c] += src[c];
    }
  }
  return push(std::move(out), requires_grad(x), [x, rows = std::move(rows), self = nodes_.size()](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& gx = t.grad_of(x);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto dst = gx.row(r);
      auto src = g.row(rows[r]);
      for (std::size_t c = 0; c < src.size(); ++c) {
        dst[c] += src[c];
      }
    }
  });
}

Var Tape::reshape(Var x, std::size_t rows, std::size_t cols) {
  const Matrix& xv = value(x);
  if (rows * cols != xv.size()) {
    throw PreconditionError("reshape: element count changes");
  }
  Matrix out(rows, cols);
  std::copy(xv.values().begin(), xv.values().end(), out.values().begin());
  return push(std::move(out), requires_grad(x), [x, self = nodes_.size()](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& gx = t.grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx.data()[i] += g.data()[i];
    }
  });
}

Var Tape::slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Matrix& xv = value(x);
  if (begin > end || end > xv.cols()) {
    throw PreconditionError("slice_cols: range out of bounds");
  }
  Matrix out(xv.rows(), end - begin);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t c = begin; c < end; ++c) {
      out(r, c - begin) = xv(r, c);
    }
  }
  return push(std::move(out), requires_grad(x), [x, begin, self = nodes_.size()](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& gx = t.grad_of(x);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < g.cols(); ++c) {
        gx(r, c + begin) += g(r, c);
      }
    }
  });
}

namespace {

Matrix head_slice(const Matrix& m, std::size_t c0, std::size_t dh) {
  Matrix out(m.rows(), dh);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    std::copy_n(m.row(r).data() + c0, dh, out.row(r).data());
  }
  return out;
}

}  // namespace

Var Tape::attention(Var q, Var k, Var v, std::shared_ptr<const AttentionPlan> plan) {
  const Matrix& qv = value(q);
  const Matrix& kv = value(k);
  const Matrix& vv = value(v);
  if (!qv.same_shape(kv) || !qv.same_shape(vv)) {
    throw PreconditionError("attention: q, k, v shapes differ");
  }
  const std::size_t n = qv.rows();
  const auto H = static_cast<std::size_t>(plan->n_heads);
  if (qv.cols() % H != 0) {
    throw PreconditionError("attention: width not divisible by head count");
  }
  if (plan->keys.empty() || plan->keys[0].size() != n) {
    throw PreconditionError("attention: sequence length does not match the mask plan");
  }
  const std::size_t dh = qv.cols() / H;
  Matrix out(n, qv.cols());
  for (std::size_t h = 0; h < H; ++h) {
    const auto g = static_cast<std::size_t>(plan->group_of_head(static_cast<int>(h)));
    const Matrix qh = head_slice(qv, h * dh, dh);
    const Matrix kh = head_slice(kv, h * dh, dh);
    const Matrix vh = head_slice(vv, h * dh, dh);
    const Matrix oh = plan->use_token_masks ? dense_attention(qh, kh, vh, plan->token_masks[g])
                                            : block_sparse_attention(qh, kh, vh, plan->block_masks[g], *plan->grid);
    for (std::size_t r = 0; r < n; ++r) {
      std::copy_n(oh.row(r).data(), dh, out.row(r).data() + h * dh);
    }
  }
  const bool rg = requires_grad(q) || requires_grad(k) || requires_grad(v);
  return push(std::move(out), rg, [q, k, v, plan = std::move(plan), self = nodes_.size()](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& qv = t.value(q);
    const Matrix& kv = t.value(k);
    const Matrix& vv = t.value(v);
    const std::size_t n = qv.rows();
    const auto H = static_cast<std::size_t>(plan->n_heads);
    const std::size_t dh = qv.cols() / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix dq(n, qv.cols());
    Matrix dk(n, qv.cols());
    Matrix dv(n, qv.cols());
    std::vector<double> p;
    std::vector<double> dp;
    for (std::size_t h = 0; h < H; ++h) {
      const auto& keys = plan->keys[static_cast<std::size_t>(plan->group_of_head(static_cast<int>(h)))];
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& ks = keys[i];
        if (ks.empty()) {
          continue;
        }
        const double* qi = qv.row(i).data() + c0;
        const double* gi = g.row(i).data() + c0;
        p.assign(ks.size(), 0.0);
        dp.assign(ks.size(), 0.0);
        double mx = -INFINITY;
        for (std::size_t a = 0; a < ks.size(); ++a) {
          const double* kj = kv.row(ks[a]).data() + c0;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            s += qi[c] * kj[c];
          }
          p[a] = s * scale;
          mx = std::max(mx, p[a]);
        }
        double z = 0.0;
        for (double& e : p) {
          e = std::exp(e - mx);
          z += e;
        }
        double dot = 0.0;
        for (std::size_t a = 0; a < ks.size(); ++a) {
          p[a] /= z;
          const double* vj = vv.row(ks[a]).data() + c0;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            s += gi[c] * vj[c];
          }
          dp[a] = s;
          dot += p[a] * s;
        }
        double* dqi = dq.row(i).data() + c0;
        for (std::size_t a = 0; a < ks.size(); ++a) {
          const double ds = p[a] * (dp[a] - dot) * scale;
          const double* kj = kv.row(ks[a]).data() + c0;
          double* dkj = dk.row(ks[a]).data() + c0;
          double* dvj = dv.row(ks[a]).data() + c0;
          for (std::size_t c = 0; c < dh; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
            dvj[c] += p[a] * gi[c];
          }
        }
      }
    }
    const std::pair<Var, const Matrix*> parts[] = {{q, &dq}, {k, &dk}, {v, &dv}};
    for (const auto& [var, d] : parts) {
      if (!t.requires_grad(var)) {
        continue;
      }
      Matrix& gv = t.grad_of(var);
      for (std::size_t i = 0; i < gv.size(); ++i) {
        gv.data()[i] += d->data()[i];
      }
    }
  });
}

Var Tape::row_norm_loss(Var pred, const Matrix& target, RowNorm norm, double divisor) {
  const Matrix& pv = value(pred);
  require_same_shape(pv, target, "row_norm_loss");
  if (!(divisor > 0.0)) {
    throw PreconditionError("row_norm_loss: divisor must be positive");
  }
  Matrix err(pv.rows(), pv.cols());
  double total = 0.0;
  for (std::size_t r = 0; r < pv.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < pv.cols(); ++c) {
      const double e = pv(r, c) - target(r, c);
      err(r, c) = e;
      acc += norm == RowNorm::L1 ? std::abs(e) : e * e;
    }
    total += norm == RowNorm::L2 ? std::sqrt(acc) : acc;
  }
  Matrix out(1, 1, total / divisor);
  auto saved = std::make_shared<Matrix>(std::move(err));
  return push(std::move(out), requires_grad(pred), [pred, norm, divisor, saved, self = nodes_.size()](Tape& t) {
    const double g = t.nodes_[self].grad(0, 0) / divisor;
    Matrix& gp = t.grad_of(pred);
    const Matrix& e = *saved;
    for (std::size_t r = 0; r < e.rows(); ++r) {
      double len = 0.0;
      if (norm == RowNorm::L2) {
        for (std::size_t c = 0; c < e.cols(); ++c) {
          len += e(r, c) * e(r, c);
        }
        len = std::sqrt(len);
        if (len == 0.0) {
          continue;  // subgradient 0 at the kink
        }
      }
      for (std::size_t c = 0; c < e.cols(); ++c) {
        const double x = e(r, c);
        double d = 0.0;
        switch (norm) {
          case RowNorm::L1:
            d = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
            break;
          case RowNorm::L2:
            d = x / len;
            break;
          case RowNorm::L2Squared:
            d = 2.0 * x;
            break;
        }
        gp(r, c) += g * d;
      }
    }
  });
}

Var Tape::weighted_sum(const std::vector<std::pair<Var, double>> & terms) {
  double total = 0.0;
  bool rg = false;
  for (const auto& [v, w] : terms) {
    if (value(v).size() != 1) {
      throw PreconditionError("weighted_sum: terms must be scalars");
    }
    total += w * value(v)(0, 0);
    rg = rg || requires_grad(v);
  }
  return push(Matrix(1, 1, total), rg, [terms, self = nodes_.size()](Tape& t) {
    const double g = t.nodes_[self].grad(0, 0);
    for (const auto& [v, w] : terms) {
      if (t.requires_grad(v)) {
        t.grad_of(v)(0, 0) += w * g;
      }
    }
  });
}

}  // namespace foresight::ad
