#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sspformer/core/errors.hpp"
#include "sspformer/core/fft.hpp"
#include "sspformer/core/ops.hpp"
#include "sspformer/core/tensor.hpp"

namespace sspf {

// Dynamic reverse-mode tape. Nodes are created in forward order and own their
// values; backward() walks the creation order in reverse, so gradient
// accumulation order is fixed and runs are bit-reproducible. Values are
// immutable once a node exists; parents are referenced, never copied.
class Tape;

struct Node {
  RealTensor value;
  RealTensor grad;
  bool requires_grad = false;
  bool has_grad = false;
  std::function<void()> backward_fn;
  const char* op = "leaf";

  const RealTensor& g() const {
    if (!has_grad) throw ContractError(std::string("node '") + op + "' has no gradient");
    return grad;
  }
};

using Var = Node*;

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var leaf(RealTensor v, bool requires_grad = true) {
    Var n = alloc();
    n->value = std::move(v);
    n->requires_grad = grad_enabled_ && requires_grad;
    n->op = "leaf";
    return n;
  }

  Var constant(RealTensor v) { return leaf(std::move(v), false); }

  // Accumulate g into n->grad (lazily zero-initialized).
  void accum(Var n, const RealTensor& g) {
    if (!n->requires_grad) return;
    if (!n->has_grad) {
      n->grad = RealTensor::zeros(n->value.shape);
      n->has_grad = true;
    }
    for (std::size_t i = 0; i < g.size(); ++i) n->grad.data[i] += g.data[i];
  }

  void backward(Var loss) {
    if (loss->value.size() != 1) throw ContractError("backward requires a scalar loss, got " + loss->value.shape.str());
    if (!grad_enabled_) throw ContractError("backward on a no-grad tape");
    loss->grad = RealTensor::full(Shape{1}, 1.0);
    loss->has_grad = true;
    loss->requires_grad = true;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node* n = it->get();
      if (n->has_grad && n->backward_fn) n->backward_fn();
    }
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    RealTensor v = a->value;
    for (std::size_t i = 0; i < v.size(); ++i) v.data[i] += b->value.data[i];
    return make(std::move(v), "add", {a, b}, [this, a, b](Node* n) {
      accum(a, n->grad);
      accum(b, n->grad);
    });
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    RealTensor v = a->value;
    for (std::size_t i = 0; i < v.size(); ++i) v.data[i] -= b->value.data[i];
    return make(std::move(v), "sub", {a, b}, [this, a, b](Node* n) {
      accum(a, n->grad);
      if (b->requires_grad) {
        RealTensor gb = n->grad;
        for (auto& x : gb.data) x = -x;
        accum(b, gb);
      }
    });
  }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    RealTensor v = a->value;
    for (std::size_t i = 0; i < v.size(); ++i) v.data[i] *= b->value.data[i];
    return make(std::move(v), "mul", {a, b}, [this, a, b](Node* n) {
      if (a->requires_grad) {
        RealTensor ga = n->grad;
        for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] *= b->value.data[i];
        accum(a, ga);
      }
      if (b->requires_grad) {
        RealTensor gb = n->grad;
        for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] *= a->value.data[i];
        accum(b, gb);
      }
    });
  }

  Var scale(Var a, double c) {
    RealTensor v = a->value;
    for (auto& x : v.data) x *= c;
    return make(std::move(v), "scale", {a}, [this, a, c](Node* n) {
      RealTensor g = n->grad;
      for (auto& x : g.data) x *= c;
      accum(a, g);
    });
  }

  Var add_const(Var a, double c) {
    RealTensor v = a->value;
    for (auto& x : v.data) x += c;
    return make(std::move(v), "add_const", {a}, [this, a](Node* n) { accum(a, n->grad); });
  }

  // Elementwise product with a constant (non-learnable) tensor, e.g. a mask.
  Var mul_mask(Var a, const RealTensor& m) {
    check_shape(a->value.shape, m.shape, "mul_mask");
    RealTensor v = a->value;
    for (std::size_t i = 0; i < v.size(); ++i) v.data[i] *= m.data[i];
    auto mc = std::make_shared<RealTensor>(m);
    return make(std::move(v), "mul_mask", {a}, [this, a, mc](Node* n) {
      RealTensor g = n->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] *= mc->data[i];
      accum(a, g);
    });
  }

  Var sqrt_elem(Var a) {
    RealTensor v = a->value;
    for (auto& x : v.data) x = std::sqrt(x);
    return make(std::move(v), "sqrt", {a}, [this, a](Node* n) {
      RealTensor g = n->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = n->value.data[i];
        g.data[i] = y > 0.0 ? g.data[i] * 0.5 / y : 0.0;  // zero-variance subgradient pinned to 0
      }
      accum(a, g);
    });
  }

  Var gelu(Var a) {
    RealTensor v = a->value;
    for (auto& x : v.data) x = gelu_scalar(x);
    return make(std::move(v), "gelu", {a}, [this, a](Node* n) {
      RealTensor g = n->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] *= gelu_grad_scalar(a->value.data[i]);
      accum(a, g);
    });
  }

  Var sigmoid(Var a) {
    RealTensor v = a->value;
    for (auto& x : v.data) x = sigmoid_scalar(x);
    return make(std::move(v), "sigmoid", {a}, [this, a](Node* n) {
      RealTensor g = n->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = n->value.data[i];
        g.data[i] *= y * (1.0 - y);
      }
      accum(a, g);
    });
  }

  // ---- reductions and broadcasts ----

  Var sum_all(Var a) {
    double s = 0.0;
    for (double x : a->value.data) s += x;
    return make(RealTensor(Shape{1}, {s}), "sum_all", {a}, [this, a](Node* n) {
      accum(a, RealTensor::full(a->value.shape, n->grad.data[0]));
    });
  }

  Var mean_all(Var a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->value.size())); }

  // Mean over rows of [N,D] -> [D].
  Var mean_rows(Var a) {
    if (a->value.rank() != 2) throw ShapeError("mean_rows expects [N,D], got " + a->value.shape.str());
    const std::size_t nr = a->value.shape[0], d = a->value.shape[1];
    RealTensor v(Shape{d});
    for (std::size_t i = 0; i < nr; ++i)
      for (std::size_t j = 0; j < d; ++j) v.data[j] += a->value.at(i, j);
    for (auto& x : v.data) x /= static_cast<double>(nr);
    return make(std::move(v), "mean_rows", {a}, [this, a, nr, d](Node* n) {
      RealTensor g(a->value.shape);
      for (std::size_t i = 0; i < nr; ++i)
        for (std::size_t j = 0; j < d; ++j) g.at(i, j) = n->grad.data[j] / static_cast<double>(nr);
      accum(a, g);
    });
  }

  // tensor (any shape) combined with a scalar node of shape [1]
  Var add_b(Var a, Var s) { return bcast(a, s, "add_b"); }
  Var sub_b(Var a, Var s) { return bcast(a, s, "sub_b"); }
  Var mul_b(Var a, Var s) { return bcast(a, s, "mul_b"); }
  Var div_b(Var a, Var s) { return bcast(a, s, "div_b"); }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    RealTensor v = sspf::matmul(a->value, b->value);
    return make(std::move(v), "matmul", {a, b}, [this, a, b](Node* n) {
      if (a->requires_grad) accum(a, matmul_nt(n->grad, b->value));
      if (b->requires_grad) accum(b, matmul_tn(a->value, n->grad));
    });
  }

  Var transpose(Var a) {
    return make(sspf::transpose(a->value), "transpose", {a},
                [this, a](Node* n) { accum(a, sspf::transpose(n->grad)); });
  }

  Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
    if (a->value.rank() != 2 || c1 > a->value.shape[1] || c0 >= c1)
      throw ShapeError("slice_cols bad range on " + a->value.shape.str());
    const std::size_t nr = a->value.shape[0], nc = c1 - c0;
    RealTensor v(Shape{nr, nc});
    for (std::size_t i = 0; i < nr; ++i)
      for (std::size_t j = 0; j < nc; ++j) v.at(i, j) = a->value.at(i, c0 + j);
    return make(std::move(v), "slice_cols", {a}, [this, a, c0, nr, nc](Node* n) {
      RealTensor g(a->value.shape);
      for (std::size_t i = 0; i < nr; ++i)
        for (std::size_t j = 0; j < nc; ++j) g.at(i, c0 + j) = n->grad.at(i, j);
      accum(a, g);
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols on empty list");
    const std::size_t nr = parts[0]->value.shape[0];
    std::size_t nc = 0;
    for (Var p : parts) {
      if (p->value.rank() != 2 || p->value.shape[0] != nr) throw ShapeError("concat_cols row mismatch");
      nc += p->value.shape[1];
    }
    RealTensor v(Shape{nr, nc});
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t w = p->value.shape[1];
      for (std::size_t i = 0; i < nr; ++i)
        for (std::size_t j = 0; j < w; ++j) v.at(i, off + j) = p->value.at(i, j);
      off += w;
    }
    auto ps = parts;
    return make(std::move(v), "concat_cols", parts, [this, ps, nr](Node* n) {
      std::size_t off = 0;
      for (Var p : ps) {
        const std::size_t w = p->value.shape[1];
        if (p->requires_grad) {
          RealTensor g(p->value.shape);
          for (std::size_t i = 0; i < nr; ++i)
            for (std::size_t j = 0; j < w; ++j) g.at(i, j) = n->grad.at(i, off + j);
          accum(p, g);
        }
        off += w;
      }
    });
  }

  // Row-wise softmax of [N,M].
  Var softmax_rows(Var a) {
    if (a->value.rank() != 2) throw ShapeError("softmax_rows expects rank 2, got " + a->value.shape.str());
    RealTensor v = sspf::softmax(a->value, 1);
    return make(std::move(v), "softmax_rows", {a}, [this, a](Node* n) {
      const std::size_t nr = n->value.shape[0], nc = n->value.shape[1];
      RealTensor g(n->value.shape);
      for (std::size_t i = 0; i < nr; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < nc; ++j) dot += n->grad.at(i, j) * n->value.at(i, j);
        for (std::size_t j = 0; j < nc; ++j) g.at(i, j) = n->value.at(i, j) * (n->grad.at(i, j) - dot);
      }
      accum(a, g);
    });
  }

  // Bias add over rows: [N,D] + [D].
  Var add_rowvec(Var a, Var v) {
    if (a->value.rank() != 2 || v->value.rank() != 1 || a->value.shape[1] != v->value.shape[0])
      throw ShapeError("add_rowvec shapes " + a->value.shape.str() + " vs " + v->value.shape.str());
    RealTensor out = a->value;
    const std::size_t nr = out.shape[0], nc = out.shape[1];
    for (std::size_t i = 0; i < nr; ++i)
      for (std::size_t j = 0; j < nc; ++j) out.at(i, j) += v->value.data[j];
    return make(std::move(out), "add_rowvec", {a, v}, [this, a, v, nr, nc](Node* n) {
      accum(a, n->grad);
      if (v->requires_grad) {
        RealTensor gv(v->value.shape);
        for (std::size_t i = 0; i < nr; ++i)
          for (std::size_t j = 0; j < nc; ++j) gv.data[j] += n->grad.at(i, j);
        accum(v, gv);
      }
    });
  }

  // ---- structured ops ----

  Var conv2d(Var x, Var k, Pad pad = Pad::same) {
    RealTensor v = sspf::conv2d(x->value, k->value, pad);
    return make(std::move(v), "conv2d", {x, k}, [this, x, k, pad](Node* n) {
      if (x->requires_grad) accum(x, conv2d_grad_input(x->value.shape, k->value, n->grad, pad));
      if (k->requires_grad) accum(k, conv2d_grad_kernel(x->value, k->value.shape, n->grad, pad));
    });
  }

  // [C,H,W] + per-channel bias [C].
  Var add_chan_bias(Var x, Var b) {
    if (x->value.rank() != 3 || b->value.rank() != 1 || x->value.shape[0] != b->value.shape[0])
      throw ShapeError("add_chan_bias shapes " + x->value.shape.str() + " vs " + b->value.shape.str());
    RealTensor out = x->value;
    const std::size_t c = out.shape[0], hw = out.shape[1] * out.shape[2];
    for (std::size_t cc = 0; cc < c; ++cc)
      for (std::size_t i = 0; i < hw; ++i) out.data[cc * hw + i] += b->value.data[cc];
    return make(std::move(out), "add_chan_bias", {x, b}, [this, x, b, c, hw](Node* n) {
      accum(x, n->grad);
      if (b->requires_grad) {
        RealTensor gb(b->value.shape);
        for (std::size_t cc = 0; cc < c; ++cc)
          for (std::size_t i = 0; i < hw; ++i) gb.data[cc] += n->grad.data[cc * hw + i];
        accum(b, gb);
      }
    });
  }

  Var pixel_shuffle(Var x, std::size_t r) {
    RealTensor v = sspf::pixel_shuffle(x->value, r);
    return make(std::move(v), "pixel_shuffle", {x},
                [this, x, r](Node* n) { accum(x, sspf::pixel_unshuffle(n->grad, r)); });
  }

  // [C,H,W] -> [N, C*P*P] with N = (H/P)*(W/P); token n = pi*(W/P)+pj holds the
  // P x P patch of every channel, flattened channel-major.
  Var patchify(Var x, std::size_t p) {
    const Shape& s = x->value.shape;
    if (s.rank() != 3) throw ShapeError("patchify expects [C,H,W], got " + s.str());
    if (s[1] % p != 0 || s[2] % p != 0)
      throw ShapeError("patch size " + std::to_string(p) + " does not divide " + s.str());
    const std::size_t c = s[0], gh = s[1] / p, gw = s[2] / p;
    RealTensor v(Shape{gh * gw, c * p * p});
    for (std::size_t pi = 0; pi < gh; ++pi)
      for (std::size_t pj = 0; pj < gw; ++pj) {
        const std::size_t nrow = pi * gw + pj;
        for (std::size_t cc = 0; cc < c; ++cc)
          for (std::size_t u = 0; u < p; ++u)
            for (std::size_t vv = 0; vv < p; ++vv)
              v.at(nrow, (cc * p + u) * p + vv) = x->value.at(cc, pi * p + u, pj * p + vv);
      }
    return make(std::move(v), "patchify", {x}, [this, x, p, c, gh, gw](Node* n) {
      RealTensor g(x->value.shape);
      for (std::size_t pi = 0; pi < gh; ++pi)
        for (std::size_t pj = 0; pj < gw; ++pj) {
          const std::size_t nrow = pi * gw + pj;
          for (std::size_t cc = 0; cc < c; ++cc)
            for (std::size_t u = 0; u < p; ++u)
              for (std::size_t vv = 0; vv < p; ++vv)
                g.at(cc, pi * p + u, pj * p + vv) = n->grad.at(nrow, (cc * p + u) * p + vv);
        }
      accum(x, g);
    });
  }

  // Inverse of patchify: [N, C*P*P] -> [C,H,W].
  Var unpatchify(Var t, std::size_t c, std::size_t h, std::size_t w, std::size_t p) {
    const Shape& s = t->value.shape;
    const std::size_t gh = h / p, gw = w / p;
    if (s.rank() != 2 || s[0] != gh * gw || s[1] != c * p * p)
      throw ShapeError("unpatchify shape " + s.str() + " incompatible with target");
    RealTensor v(Shape{c, h, w});
    for (std::size_t pi = 0; pi < gh; ++pi)
      for (std::size_t pj = 0; pj < gw; ++pj) {
        const std::size_t nrow = pi * gw + pj;
        for (std::size_t cc = 0; cc < c; ++cc)
          for (std::size_t u = 0; u < p; ++u)
            for (std::size_t vv = 0; vv < p; ++vv)
              v.at(cc, pi * p + u, pj * p + vv) = t->value.at(nrow, (cc * p + u) * p + vv);
      }
    return make(std::move(v), "unpatchify", {t}, [this, t, c, gh, gw, p](Node* n) {
      RealTensor g(t->value.shape);
      for (std::size_t pi = 0; pi < gh; ++pi)
        for (std::size_t pj = 0; pj < gw; ++pj) {
          const std::size_t nrow = pi * gw + pj;
          for (std::size_t cc = 0; cc < c; ++cc)
            for (std::size_t u = 0; u < p; ++u)
              for (std::size_t vv = 0; vv < p; ++vv)
                g.at(nrow, (cc * p + u) * p + vv) = n->grad.at(cc, pi * p + u, pj * p + vv);
        }
      accum(t, g);
    });
  }

  // Replace masked token rows with the (learnable) mask token.
  Var apply_mask(Var tokens, Var mask_token, const std::vector<bool>& masked) {
    const Shape& s = tokens->value.shape;
    if (s.rank() != 2 || masked.size() != s[0])
      throw ShapeError("apply_mask: " + std::to_string(masked.size()) + " decisions vs tokens " + s.str());
    if (mask_token->value.rank() != 1 || mask_token->value.shape[0] != s[1])
      throw ShapeError("apply_mask: mask token shape " + mask_token->value.shape.str());
    RealTensor v = tokens->value;
    const std::size_t d = s[1];
    for (std::size_t i = 0; i < s[0]; ++i)
      if (masked[i])
        for (std::size_t j = 0; j < d; ++j) v.at(i, j) = mask_token->value.data[j];
    return make(std::move(v), "apply_mask", {tokens, mask_token}, [this, tokens, mask_token, masked, d](Node* n) {
      if (tokens->requires_grad) {
        RealTensor g = n->grad;
        for (std::size_t i = 0; i < masked.size(); ++i)
          if (masked[i])
            for (std::size_t j = 0; j < d; ++j) g.at(i, j) = 0.0;
        accum(tokens, g);
      }
      if (mask_token->requires_grad) {
        RealTensor gm(mask_token->value.shape);
        for (std::size_t i = 0; i < masked.size(); ++i)
          if (masked[i])
            for (std::size_t j = 0; j < d; ++j) gm.data[j] += n->grad.at(i, j);
        accum(mask_token, gm);
      }
    });
  }

  // Spectral-envelope response used by the frequency gate: tokens [N,D] are
  // laid out per feature channel on the (gh,gw) token grid, and the result is
  // real(ifft2(|fft2(channel grid)|)) flattened back to [N,D].
  Var fourier_mag(Var x, std::size_t gh, std::size_t gw) {
    const Shape& s = x->value.shape;
    if (s.rank() != 2 || s[0] != gh * gw)
      throw ShapeError("fourier_mag: tokens " + s.str() + " vs grid " + std::to_string(gh) + "x" + std::to_string(gw));
    if (!is_power_of_two(gh) || !is_power_of_two(gw))
      throw SizingError("fourier_mag grid must be power-of-two, got " + std::to_string(gh) + "x" + std::to_string(gw));
    const std::size_t nd = s[1];
    RealTensor v(s);
    auto spectra = std::make_shared<std::vector<ComplexTensor>>();
    spectra->reserve(nd);
    ComplexTensor chan(Shape{gh, gw});
    for (std::size_t d = 0; d < nd; ++d) {
      for (std::size_t i = 0; i < gh * gw; ++i) chan.data[i] = Cplx(x->value.at(i, d), 0.0);
      ComplexTensor f = fft2(chan);
      ComplexTensor mag(f.shape);
      for (std::size_t i = 0; i < f.size(); ++i) mag.data[i] = Cplx(std::abs(f.data[i]), 0.0);
      const ComplexTensor resp = ifft2(mag);
      for (std::size_t i = 0; i < gh * gw; ++i) v.at(i, d) = resp.data[i].real();
      spectra->push_back(std::move(f));
    }
    return make(std::move(v), "fourier_mag", {x}, [this, x, gh, gw, nd, spectra](Node* n) {
      const double hw = static_cast<double>(gh * gw);
      RealTensor gx(x->value.shape);
      ComplexTensor gout(Shape{gh, gw});
      for (std::size_t d = 0; d < nd; ++d) {
        for (std::size_t i = 0; i < gh * gw; ++i) gout.data[i] = Cplx(n->grad.at(i, d), 0.0);
        // adjoint of real(ifft2(.)) is (1/HW) fft2 followed by Re
        ComplexTensor gmag = fft2(gout);
        const ComplexTensor& f = (*spectra)[d];
        ComplexTensor gf(f.shape);
        for (std::size_t i = 0; i < f.size(); ++i) {
          const double m = std::abs(f.data[i]);
          const double gm = gmag.data[i].real() / hw;
          gf.data[i] = m > 0.0 ? Cplx(gm / m, 0.0) * f.data[i] : Cplx(0.0, 0.0);
        }
        // adjoint of fft2 is HW * ifft2
        ComplexTensor gin = ifft2(gf);
        for (std::size_t i = 0; i < gh * gw; ++i) gx.at(i, d) += hw * gin.data[i].real();
      }
      accum(x, gx);
    });
  }

  // Mean per-pixel cross-entropy of logits [K,H,W] against integer labels [H,W].
  Var softmax_xent(Var logits, const RealTensor& labels) {
    const Shape& s = logits->value.shape;
    if (s.rank() != 3) throw ShapeError("softmax_xent expects logits [K,H,W], got " + s.str());
    if (labels.rank() != 2 || labels.shape[0] != s[1] || labels.shape[1] != s[2])
      throw ShapeError("softmax_xent label shape " + labels.shape.str() + " vs logits " + s.str());
    const std::size_t k = s[0], h = s[1], w = s[2], npix = h * w;
    auto probs = std::make_shared<RealTensor>(s);
    double loss = 0.0;
    for (std::size_t p = 0; p < npix; ++p) {
      double mx = logits->value.data[p];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits->value.data[c * npix + p]);
      double sum = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double e = std::exp(logits->value.data[c * npix + p] - mx);
        probs->data[c * npix + p] = e;
        sum += e;
      }
      const long y = std::lround(labels.data[p]);
      if (y < 0 || y >= static_cast<long>(k))
        throw ShapeError("softmax_xent label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
      for (std::size_t c = 0; c < k; ++c) probs->data[c * npix + p] /= sum;
      loss += -std::log(probs->data[static_cast<std::size_t>(y) * npix + p]);
    }
    loss /= static_cast<double>(npix);
    auto lab = std::make_shared<RealTensor>(labels);
    return make(RealTensor(Shape{1}, {loss}), "softmax_xent", {logits}, [this, logits, probs, lab, k, npix](Node* n) {
      const double g0 = n->grad.data[0] / static_cast<double>(npix);
      RealTensor g(logits->value.shape);
      for (std::size_t p = 0; p < npix; ++p) {
        const std::size_t y = static_cast<std::size_t>(std::lround(lab->data[p]));
        for (std::size_t c = 0; c < k; ++c)
          g.data[c * npix + p] = g0 * (probs->data[c * npix + p] - (c == y ? 1.0 : 0.0));
      }
      accum(logits, g);
    });
  }

 private:
  Var alloc() {
    nodes_.push_back(std::make_unique<Node>());
    return nodes_.back().get();
  }

  static void check_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw ShapeError(std::string(op) + ": " + a.str() + " vs " + b.str());
  }

  static void check_same(Var a, Var b, const char* op) { check_shape(a->value.shape, b->value.shape, op); }

  Var make(RealTensor v, const char* op, std::initializer_list<Var> parents, std::function<void(Node*)> bwd) {
    return make(std::move(v), op, std::vector<Var>(parents), std::move(bwd));
  }

  Var make(RealTensor v, const char* op, const std::vector<Var>& parents, std::function<void(Node*)> bwd) {
    Var n = alloc();
    n->value = std::move(v);
    n->op = op;
    if (grad_enabled_) {
      bool rg = false;
      for (Var p : parents) rg = rg || p->requires_grad;
      n->requires_grad = rg;
      if (rg) n->backward_fn = [n, fn = std::move(bwd)]() { fn(n); };
    }
    return n;
  }

  Var bcast(Var a, Var s, const char* op) {
    if (s->value.size() != 1) throw ShapeError(std::string(op) + " scalar operand must have 1 element");
    const double sv = s->value.data[0];
    RealTensor v = a->value;
    const std::string o(op);
    if (o == "add_b")
      for (auto& x : v.data) x += sv;
    else if (o == "sub_b")
      for (auto& x : v.data) x -= sv;
    else if (o == "mul_b")
      for (auto& x : v.data) x *= sv;
    else
      for (auto& x : v.data) x /= sv;
    return make(std::move(v), op, {a, s}, [this, a, s, o, sv](Node* n) {
      if (a->requires_grad) {
        RealTensor ga = n->grad;
        if (o == "mul_b")
          for (auto& x : ga.data) x *= sv;
        else if (o == "div_b")
          for (auto& x : ga.data) x /= sv;
        accum(a, ga);
      }
      if (s->requires_grad) {
        double gs = 0.0;
        if (o == "add_b")
          for (double x : n->grad.data) gs += x;
        else if (o == "sub_b")
          for (double x : n->grad.data) gs -= x;
        else if (o == "mul_b")
          for (std::size_t i = 0; i < n->grad.size(); ++i) gs += n->grad.data[i] * a->value.data[i];
        else
          for (std::size_t i = 0; i < n->grad.size(); ++i) gs += n->grad.data[i] * (-a->value.data[i] / (sv * sv));
        accum(s, RealTensor(Shape{1}, {gs}));
      }
    });
  }

  std::deque<std::unique_ptr<Node>> nodes_;
  bool grad_enabled_;
};

// Central-difference gradient of a scalar function, the independent oracle for
// every analytic gradient in the repo.
inline RealTensor finite_diff_grad(const std::function<double(const RealTensor&)>& f, const RealTensor& x,
                                   double eps = 1e-5) {
  if (eps <= 0.0) throw ContractError("finite_diff_grad requires eps > 0");
  RealTensor g(x.shape);
  RealTensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xp.data[i];
    xp.data[i] = orig + eps;
    const double fp = f(xp);
    xp.data[i] = orig - eps;
    const double fm = f(xp);
    xp.data[i] = orig;
    g.data[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

}  // namespace sspf
