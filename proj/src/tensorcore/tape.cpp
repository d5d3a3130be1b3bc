#include "dynq/tensorcore/tape.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "dynq/tensorcore/errors.hpp"

namespace dynq {

namespace {

void accumulate(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw StateError("vars belong to different tapes");
}

void require_shape(const Tensor& t, std::size_t r, std::size_t c, const char* what) {
  if (t.rank() != 2 || t.rows() != r || t.cols() != c) {
    throw DimensionError(std::string(what) + ": expected [" + std::to_string(r) + "x" +
                         std::to_string(c) + "], got " + t.shape_string());
  }
}

}  // namespace

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(ParameterSet& params, const std::string& name) {
  Parameter& p = params.at(name);
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
  Node n;
  n.value = p.value;
  n.requires_grad = record_grad_ && !p.frozen;
  n.param = &p;
  nodes_.push_back(std::move(n));
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& in : inputs) {
    if (in.tape != this) throw StateError("input var recorded on a different tape");
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss, double seed) {
  if (loss.tape != this) throw StateError("backward on a var from another tape");
  if (value(loss).size() != 1) {
    throw DimensionError("backward requires a scalar loss, got " + value(loss).shape_string());
  }
  if (!nodes_[loss.id].requires_grad) return;
  grad(loss)[0] += seed;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) {
      // The callback may allocate gradient buffers of other nodes but never
      // appends nodes, so this reference stays valid.
      n.backward(*this, n.grad);
    }
  }
  for (auto& n : nodes_) {
    if (n.param == nullptr || !n.requires_grad) continue;
    if (!n.grad.empty()) accumulate(n.param->grad, n.grad);
    n.param->grad_ready = true;
  }
}

// ---- ops -------------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  Tape& t = *a.tape;
  return t.record(matmul(a.value(), b.value()), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (tape.requires_grad(a)) accumulate(tape.grad(a), matmul_bt(g, tape.value(b)));
    if (tape.requires_grad(b)) accumulate(tape.grad(b), matmul_at(tape.value(a), g));
  });
}

Var matmul_bt(Var a, Var b) {
  require_same_tape(a, b);
  Tape& t = *a.tape;
  return t.record(matmul_bt(a.value(), b.value()), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (tape.requires_grad(a)) accumulate(tape.grad(a), matmul(g, tape.value(b)));
    if (tape.requires_grad(b)) accumulate(tape.grad(b), matmul_at(g, tape.value(a)));
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  if (!a.value().same_shape(b.value())) {
    throw DimensionError("add shape mismatch " + a.value().shape_string() + " vs " +
                         b.value().shape_string());
  }
  Tensor out = a.value();
  accumulate(out, b.value());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (tape.requires_grad(a)) accumulate(tape.grad(a), g);
    if (tape.requires_grad(b)) accumulate(tape.grad(b), g);
  });
}

Var add_row(Var x, Var bias) {
  require_same_tape(x, bias);
  const Tensor& xv = x.value();
  require_shape(bias.value(), 1, xv.cols(), "add_row bias");
  Tensor out = xv;
  const double* b = bias.value().row(0);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    double* r = out.row(i);
    for (std::size_t j = 0; j < out.cols(); ++j) r[j] += b[j];
  }
  return x.tape->record(std::move(out), {x, bias}, [x, bias](Tape& tape, const Tensor& g) {
    if (tape.requires_grad(x)) accumulate(tape.grad(x), g);
    if (tape.requires_grad(bias)) {
      Tensor& gb = tape.grad(bias);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        const double* gr = g.row(i);
        for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += gr[j];
      }
    }
  });
}

Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.values()) v *= factor;
  return x.tape->record(std::move(out), {x}, [x, factor](Tape& tape, const Tensor& g) {
    Tensor& gx = tape.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

Var scale_by_exp(Var x, Var log_scale) {
  require_same_tape(x, log_scale);
  require_shape(log_scale.value(), 1, 1, "scale_by_exp log_scale");
  const double factor = std::exp(log_scale.value()[0]);
  Tensor out = x.value();
  for (auto& v : out.values()) v *= factor;
  return x.tape->record(std::move(out), {x, log_scale},
                        [x, log_scale, factor](Tape& tape, const Tensor& g) {
                          const Tensor& xv = tape.value(x);
                          if (tape.requires_grad(x)) {
                            Tensor& gx = tape.grad(x);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
                          }
                          if (tape.requires_grad(log_scale)) {
                            double s = 0.0;
                            for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * xv[i];
                            tape.grad(log_scale)[0] += factor * s;
                          }
                        });
}

Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

Var gelu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  }
  return x.tape->record(std::move(out), {x}, [x](Tape& tape, const Tensor& g) {
    const Tensor& xv = tape.value(x);
    Tensor& gx = tape.grad(x);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_same_tape(x, gain);
  require_same_tape(x, bias);
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  require_shape(gain.value(), 1, d, "layer_norm gain");
  require_shape(bias.value(), 1, d, "layer_norm bias");
  Tensor xhat = Tensor::matrix(n, d);
  std::vector<double> rstd(n);
  Tensor out = Tensor::matrix(n, d);
  const double* gv = gain.value().row(0);
  const double* bv = bias.value().row(0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = xv.row(i);
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (xr[j] - mean) * rstd[i];
      out(i, j) = xhat(i, j) * gv[j] + bv[j];
    }
  }
  return x.tape->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& tape, const Tensor& g) {
        const std::size_t n = g.rows(), d = g.cols();
        if (tape.requires_grad(gain) || tape.requires_grad(bias)) {
          const bool want_g = tape.requires_grad(gain), want_b = tape.requires_grad(bias);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
              if (want_g) tape.grad(gain)[j] += g(i, j) * xhat(i, j);
              if (want_b) tape.grad(bias)[j] += g(i, j);
            }
          }
        }
        if (!tape.requires_grad(x)) return;
        const double* gv = tape.value(gain).row(0);
        Tensor& gx = tape.grad(x);
        std::vector<double> dxhat(d);
        for (std::size_t i = 0; i < n; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = g(i, j) * gv[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat(i, j);
          }
          mean_d /= static_cast<double>(d);
          mean_dx /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            gx(i, j) += rstd[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
          }
        }
      });
}

Var softmax_rows(Var x) {
  Tensor out = softmax_rows(x.value());
  return x.tape->record(std::move(out), {x}, [x](Tape& tape, const Tensor& g) {
    // The output of this node is needed; recompute instead of capturing a copy.
    const Tensor y = softmax_rows(tape.value(x));
    Tensor& gx = tape.grad(x);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) gx(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

Var log_softmax_rows(Var x) {
  Tensor out = log_softmax_rows(x.value());
  Tensor probs = out;
  for (auto& v : probs.values()) v = std::exp(v);
  return x.tape->record(std::move(out), {x}, [x, probs = std::move(probs)](Tape& tape, const Tensor& g) {
    Tensor& gx = tape.grad(x);
    for (std::size_t i = 0; i < probs.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < probs.cols(); ++j) s += g(i, j);
      for (std::size_t j = 0; j < probs.cols(); ++j) gx(i, j) += g(i, j) - probs(i, j) * s;
    }
  });
}

Var gather_rows(Var x, const std::vector<std::size_t>& indices) {
  const Tensor& xv = x.value();
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor out = Tensor::matrix(indices.size(), xv.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= xv.rows()) {
      throw BoundsError("gather_rows: index " + std::to_string(indices[r]) + " out of range for " +
                        std::to_string(xv.rows()) + " rows");
    }
    const double* src = xv.row(indices[r]);
    std::copy(src, src + xv.cols(), out.row(r));
  }
  return x.tape->record(std::move(out), {x}, [x, indices](Tape& tape, const Tensor& g) {
    Tensor& gx = tape.grad(x);
    for (std::size_t r = 0; r < indices.size(); ++r) {
      double* dst = gx.row(indices[r]);
      const double* src = g.row(r);
      for (std::size_t j = 0; j < g.cols(); ++j) dst[j] += src[j];
    }
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  if (count == 0 || begin + count > xv.rows()) {
    throw BoundsError("slice_rows: rows [" + std::to_string(begin) + ", " +
                      std::to_string(begin + count) + ") out of range for " +
                      std::to_string(xv.rows()) + " rows");
  }
  Tensor out = Tensor::matrix(count, xv.cols());
  std::copy(xv.row(begin), xv.row(begin) + count * xv.cols(), out.row(0));
  return x.tape->record(std::move(out), {x}, [x, begin](Tape& tape, const Tensor& g) {
    Tensor& gx = tape.grad(x);
    double* dst = gx.row(begin);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = parts.front().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.cols() != d) {
      throw DimensionError("concat_rows: column mismatch " + std::to_string(p.cols()) + " vs " +
                           std::to_string(d));
    }
    total += p.rows();
  }
  Tensor out = Tensor::matrix(total, d);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    std::copy(v.storage().begin(), v.storage().end(), out.row(offset));
    offset += v.rows();
  }
  return parts.front().tape->record(std::move(out), parts, [parts](Tape& tape, const Tensor& g) {
    std::size_t offset = 0;
    for (const Var& p : parts) {
      const std::size_t r = p.rows();
      if (tape.requires_grad(p)) {
        Tensor& gp = tape.grad(p);
        const double* src = g.row(offset);
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
      }
      offset += r;
    }
  });
}

Var cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<bool>& mask) {
  const Tensor& z = logits.value();
  const std::size_t m = z.rows(), v = z.cols();
  if (targets.size() != m || mask.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(m) + " rows but " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw BoundsError("cross_entropy: target " + std::to_string(targets[i]) +
                        " outside vocabulary of " + std::to_string(v));
    }
    ++count;
  }
  if (count == 0) throw ParameterError("cross_entropy: every position is masked (empty loss)");
  const Tensor logp = log_softmax_rows(z);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (mask[i]) total -= logp(i, static_cast<std::size_t>(targets[i]));
  }
  const double inv = 1.0 / static_cast<double>(count);
  return logits.tape->record(
      Tensor::scalar(total * inv), {logits},
      [logits, targets, mask, logp, inv](Tape& tape, const Tensor& g) {
        Tensor& gz = tape.grad(logits);
        const double s = g[0] * inv;
        for (std::size_t i = 0; i < logp.rows(); ++i) {
          if (!mask[i]) continue;
          for (std::size_t j = 0; j < logp.cols(); ++j) gz(i, j) += s * std::exp(logp(i, j));
          gz(i, static_cast<std::size_t>(targets[i])) -= s;
        }
      });
}

AttentionResult attention(Var q, Var k, Var v, std::size_t heads, bool causal) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t n = qv.rows(), m = kv.rows(), d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != m) {
    throw DimensionError("attention: q " + qv.shape_string() + ", k " + kv.shape_string() +
                         ", v " + vv.shape_string() + " are incompatible");
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (causal && n != m) throw DimensionError("attention: causal mask needs square scores");
  const std::size_t dk = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  // probs laid out [head][query][key]
  std::vector<double> probs(heads * n * m, 0.0);
  Tensor out = Tensor::matrix(n, d);
  Tensor mean_w = Tensor::matrix(n, m);
  std::vector<double> scores(m);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dk;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t visible = causal ? i + 1 : m;
      const double* qr = qv.row(i) + off;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < visible; ++j) {
        const double* kr = kv.row(j) + off;
        double s = 0.0;
        for (std::size_t c = 0; c < dk; ++c) s += qr[c] * kr[c];
        scores[j] = s * inv_sqrt;
        mx = std::max(mx, scores[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < visible; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        z += scores[j];
      }
      double* p = probs.data() + (h * n + i) * m;
      double* orow = out.row(i) + off;
      for (std::size_t j = 0; j < visible; ++j) {
        p[j] = scores[j] / z;
        mean_w(i, j) += p[j] / static_cast<double>(heads);
        const double* vr = vv.row(j) + off;
        for (std::size_t c = 0; c < dk; ++c) orow[c] += p[j] * vr[c];
      }
    }
  }

  Var result = q.tape->record(
      std::move(out), {q, k, v},
      [q, k, v, heads, causal, dk, inv_sqrt, probs = std::move(probs)](Tape& tape,
                                                                        const Tensor& g) {
        const Tensor& qv = tape.value(q);
        const Tensor& kv = tape.value(k);
        const Tensor& vv = tape.value(v);
        const std::size_t n = qv.rows(), m = kv.rows();
        const bool gq = tape.requires_grad(q), gk = tape.requires_grad(k), gv = tape.requires_grad(v);
        Tensor* dq = gq ? &tape.grad(q) : nullptr;
        Tensor* dkk = gk ? &tape.grad(k) : nullptr;
        Tensor* dv = gv ? &tape.grad(v) : nullptr;
        std::vector<double> dp(m), ds(m);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dk;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t visible = causal ? i + 1 : m;
            const double* p = probs.data() + (h * n + i) * m;
            const double* gr = g.row(i) + off;
            double dot = 0.0;
            for (std::size_t j = 0; j < visible; ++j) {
              const double* vr = vv.row(j) + off;
              double s = 0.0;
              for (std::size_t c = 0; c < dk; ++c) s += gr[c] * vr[c];
              dp[j] = s;
              dot += s * p[j];
              if (dv) {
                double* dvr = dv->row(j) + off;
                for (std::size_t c = 0; c < dk; ++c) dvr[c] += p[j] * gr[c];
              }
            }
            for (std::size_t j = 0; j < visible; ++j) ds[j] = p[j] * (dp[j] - dot) * inv_sqrt;
            if (dq) {
              double* dqr = dq->row(i) + off;
              for (std::size_t j = 0; j < visible; ++j) {
                const double* kr = kv.row(j) + off;
                for (std::size_t c = 0; c < dk; ++c) dqr[c] += ds[j] * kr[c];
              }
            }
            if (dkk) {
              const double* qr = qv.row(i) + off;
              for (std::size_t j = 0; j < visible; ++j) {
                double* dkr = dkk->row(j) + off;
                for (std::size_t c = 0; c < dk; ++c) dkr[c] += ds[j] * qr[c];
              }
            }
          }
        }
      });
  return {result, std::move(mean_w)};
}

}  // namespace dynq
