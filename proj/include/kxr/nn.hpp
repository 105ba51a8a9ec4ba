// Small CPU neural-network engine: NCHW float tensors, conv/dense layers
// with hand-written backprop, and nets assembled from JSON layer specs so
// a saved model can rebuild itself.
#pragma once

#include <cmath>
#include <cstring>
#include <map>
#include <memory>

#include "kxr/common.hpp"
#include "kxr/image.hpp"
#include "kxr/serialize.hpp"

namespace kxr::nn {

struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<float> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_), v(static_cast<size_t>(n_) * c_ * h_ * w_, 0.0f) {
    if (n_ < 0 || c_ < 0 || h_ < 0 || w_ < 0) throw UsageError("tensor: negative dimension");
  }
  size_t size() const { return v.size(); }
  int features() const { return c * h * w; }
  float& at(int in, int ic, int iy, int ix) {
    return v[((static_cast<size_t>(in) * c + ic) * h + iy) * w + ix];
  }
  float at(int in, int ic, int iy, int ix) const {
    return v[((static_cast<size_t>(in) * c + ic) * h + iy) * w + ix];
  }
  float* plane(int in, int ic) { return v.data() + (static_cast<size_t>(in) * c + ic) * h * w; }
  const float* plane(int in, int ic) const {
    return v.data() + (static_cast<size_t>(in) * c + ic) * h * w;
  }
  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

inline Tensor tensor_from_image(const Image& img) {
  Tensor t(1, 1, img.height, img.width);
  for (size_t i = 0; i < img.pixels.size(); ++i) t.v[i] = static_cast<float>(img.pixels[i]);
  return t;
}

// Stack single-sample tensors of identical shape into one batch.
inline Tensor stack(const std::vector<const Tensor*>& xs) {
  if (xs.empty()) throw UsageError("stack: empty batch");
  const Tensor& f = *xs[0];
  Tensor out(static_cast<int>(xs.size()) * f.n, f.c, f.h, f.w);
  size_t per = f.size();
  for (size_t i = 0; i < xs.size(); ++i) {
    if (!xs[i]->same_shape(f)) throw UsageError("stack: shape mismatch");
    std::memcpy(out.v.data() + i * per, xs[i]->v.data(), per * sizeof(float));
  }
  return out;
}

struct Param {
  std::string name;
  std::vector<float> value;
  std::vector<float> grad;

  explicit Param(std::string n, size_t count) : name(std::move(n)), value(count, 0.0f), grad(count, 0.0f) {}
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  virtual Tensor backward(const Tensor& gy) = 0;
  virtual std::vector<Param*> params() { return {}; }
  virtual json spec() const = 0;
};

class Conv2d : public Layer {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad)
      : in_ch_(in_ch), out_ch_(out_ch), k_(kernel), stride_(stride), pad_(pad),
        weight_("w", static_cast<size_t>(out_ch) * in_ch * kernel * kernel),
        bias_("b", static_cast<size_t>(out_ch)) {
    if (in_ch < 1 || out_ch < 1) throw UsageError("conv: bad channel count");
    if (kernel != 1 && kernel != 3) throw UsageError("conv: kernel must be 1 or 3");
    if (stride != 1 && stride != 2) throw UsageError("conv: stride must be 1 or 2");
    if (pad < 0 || pad > kernel / 2) throw UsageError("conv: bad padding");
  }

  Tensor forward(const Tensor& x, bool) override {
    if (x.c != in_ch_) throw UsageError("conv: channel mismatch");
    x_ = x;
    const int oh = (x.h + 2 * pad_ - k_) / stride_ + 1;
    const int ow = (x.w + 2 * pad_ - k_) / stride_ + 1;
    if (oh < 1 || ow < 1) throw UsageError("conv: output collapsed to zero");
    Tensor y(x.n, out_ch_, oh, ow);
    for (int in = 0; in < x.n; ++in)
      for (int oc = 0; oc < out_ch_; ++oc) {
        float* yp = y.plane(in, oc);
        const float b = bias_.value[oc];
        for (int i = 0; i < oh * ow; ++i) yp[i] = b;
        for (int ic = 0; ic < in_ch_; ++ic) {
          const float* xp = x.plane(in, ic);
          const float* wp = weight_.value.data() + ((static_cast<size_t>(oc) * in_ch_ + ic) * k_ * k_);
          for (int ky = 0; ky < k_; ++ky)
            for (int kx = 0; kx < k_; ++kx) {
              const float wv = wp[ky * k_ + kx];
              for (int oy = 0; oy < oh; ++oy) {
                const int iy = oy * stride_ - pad_ + ky;
                if (iy < 0 || iy >= x.h) continue;
                const float* xrow = xp + static_cast<size_t>(iy) * x.w;
                float* yrow = yp + static_cast<size_t>(oy) * ow;
                int ox0 = 0, ox1 = ow;
                // clip ox so ix = ox*stride - pad + kx stays in [0, w)
                while (ox0 < ow && ox0 * stride_ - pad_ + kx < 0) ++ox0;
                while (ox1 > ox0 && (ox1 - 1) * stride_ - pad_ + kx >= x.w) --ox1;
                const float* xq = xrow + (static_cast<ptrdiff_t>(ox0) * stride_ - pad_ + kx);
                if (stride_ == 1) {
                  for (int ox = ox0; ox < ox1; ++ox) yrow[ox] += wv * xq[ox - ox0];
                } else {
                  for (int ox = ox0; ox < ox1; ++ox) yrow[ox] += wv * xq[static_cast<ptrdiff_t>(ox - ox0) * stride_];
                }
              }
            }
        }
      }
    oh_ = oh;
    ow_ = ow;
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    Tensor gx(x_.n, x_.c, x_.h, x_.w);
    for (int in = 0; in < x_.n; ++in)
      for (int oc = 0; oc < out_ch_; ++oc) {
        const float* gp = gy.plane(in, oc);
        double bsum = 0;
        for (int i = 0; i < oh_ * ow_; ++i) bsum += gp[i];
        bias_.grad[oc] += static_cast<float>(bsum);
        for (int ic = 0; ic < in_ch_; ++ic) {
          const float* xp = x_.plane(in, ic);
          float* gxp = gx.plane(in, ic);
          const size_t woff = (static_cast<size_t>(oc) * in_ch_ + ic) * k_ * k_;
          for (int ky = 0; ky < k_; ++ky)
            for (int kx = 0; kx < k_; ++kx) {
              const float wv = weight_.value[woff + ky * k_ + kx];
              double wg = 0;
              for (int oy = 0; oy < oh_; ++oy) {
                const int iy = oy * stride_ - pad_ + ky;
                if (iy < 0 || iy >= x_.h) continue;
                const float* xrow = xp + static_cast<size_t>(iy) * x_.w;
                float* gxrow = gxp + static_cast<size_t>(iy) * x_.w;
                const float* grow = gp + static_cast<size_t>(oy) * ow_;
                for (int ox = 0; ox < ow_; ++ox) {
                  const int ix = ox * stride_ - pad_ + kx;
                  if (ix < 0 || ix >= x_.w) continue;
                  const float g = grow[ox];
                  wg += static_cast<double>(g) * xrow[ix];
                  gxrow[ix] += wv * g;
                }
              }
              weight_.grad[woff + ky * k_ + kx] += static_cast<float>(wg);
            }
        }
      }
    return gx;
  }

  std::vector<Param*> params() override { return {&weight_, &bias_}; }
  json spec() const override {
    return {{"type", "conv"}, {"in", in_ch_}, {"out", out_ch_}, {"k", k_}, {"stride", stride_}, {"pad", pad_}};
  }
  int fan_in() const { return in_ch_ * k_ * k_; }

 private:
  int in_ch_, out_ch_, k_, stride_, pad_;
  int oh_ = 0, ow_ = 0;
  Param weight_, bias_;
  Tensor x_;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, bool) override {
    y_ = x;
    for (auto& v : y_.v) v = v > 0.0f ? v : 0.0f;
    return y_;
  }
  Tensor backward(const Tensor& gy) override {
    Tensor gx = gy;
    for (size_t i = 0; i < gx.v.size(); ++i)
      if (y_.v[i] <= 0.0f) gx.v[i] = 0.0f;
    return gx;
  }
  json spec() const override { return {{"type", "relu"}}; }

 private:
  Tensor y_;
};

class MaxPool2 : public Layer {
 public:
  Tensor forward(const Tensor& x, bool) override {
    if (x.h % 2 != 0 || x.w % 2 != 0) throw UsageError("maxpool: odd input size");
    in_shape_ = {x.n, x.c, x.h, x.w};
    Tensor y(x.n, x.c, x.h / 2, x.w / 2);
    argmax_.assign(y.size(), 0);
    size_t o = 0;
    for (int in = 0; in < x.n; ++in)
      for (int ic = 0; ic < x.c; ++ic) {
        const float* xp = x.plane(in, ic);
        for (int oy = 0; oy < y.h; ++oy)
          for (int ox = 0; ox < y.w; ++ox, ++o) {
            size_t base = static_cast<size_t>(2 * oy) * x.w + 2 * ox;
            size_t best = base;
            float bv = xp[base];
            const size_t cand[3] = {base + 1, base + static_cast<size_t>(x.w), base + x.w + 1};
            for (size_t cdx : cand)
              if (xp[cdx] > bv) {
                bv = xp[cdx];
                best = cdx;
              }
            y.v[o] = bv;
            argmax_[o] = (static_cast<size_t>(in) * x.c + ic) * x.h * x.w + best;
          }
      }
    return y;
  }
  Tensor backward(const Tensor& gy) override {
    Tensor gx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    for (size_t o = 0; o < gy.v.size(); ++o) gx.v[argmax_[o]] += gy.v[o];
    return gx;
  }
  json spec() const override { return {{"type", "maxpool"}}; }

 private:
  std::array<int, 4> in_shape_{};
  std::vector<size_t> argmax_;
};

class GlobalAvgPool : public Layer {
 public:
  Tensor forward(const Tensor& x, bool) override {
    in_shape_ = {x.n, x.c, x.h, x.w};
    Tensor y(x.n, x.c, 1, 1);
    const double inv = 1.0 / (static_cast<double>(x.h) * x.w);
    for (int in = 0; in < x.n; ++in)
      for (int ic = 0; ic < x.c; ++ic) {
        const float* xp = x.plane(in, ic);
        double s = 0;
        for (int i = 0; i < x.h * x.w; ++i) s += xp[i];
        y.at(in, ic, 0, 0) = static_cast<float>(s * inv);
      }
    return y;
  }
  Tensor backward(const Tensor& gy) override {
    Tensor gx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    const float inv = 1.0f / static_cast<float>(in_shape_[2] * in_shape_[3]);
    for (int in = 0; in < gx.n; ++in)
      for (int ic = 0; ic < gx.c; ++ic) {
        const float g = gy.at(in, ic, 0, 0) * inv;
        float* gp = gx.plane(in, ic);
        for (int i = 0; i < gx.h * gx.w; ++i) gp[i] = g;
      }
    return gx;
  }
  json spec() const override { return {{"type", "gap"}}; }

 private:
  std::array<int, 4> in_shape_{};
};

class Flatten : public Layer {
 public:
  Tensor forward(const Tensor& x, bool) override {
    in_shape_ = {x.n, x.c, x.h, x.w};
    Tensor y = x;
    y.c = x.features();
    y.h = y.w = 1;
    return y;
  }
  Tensor backward(const Tensor& gy) override {
    Tensor gx = gy;
    gx.n = in_shape_[0];
    gx.c = in_shape_[1];
    gx.h = in_shape_[2];
    gx.w = in_shape_[3];
    return gx;
  }
  json spec() const override { return {{"type", "flatten"}}; }

 private:
  std::array<int, 4> in_shape_{};
};

class Dense : public Layer {
 public:
  Dense(int in_f, int out_f)
      : in_f_(in_f), out_f_(out_f),
        weight_("w", static_cast<size_t>(out_f) * in_f), bias_("b", static_cast<size_t>(out_f)) {
    if (in_f < 1 || out_f < 1) throw UsageError("dense: bad feature count");
  }
  Tensor forward(const Tensor& x, bool) override {
    if (x.features() != in_f_) throw UsageError("dense: feature mismatch");
    x_ = x;
    Tensor y(x.n, out_f_, 1, 1);
    for (int in = 0; in < x.n; ++in) {
      const float* xp = x.v.data() + static_cast<size_t>(in) * in_f_;
      float* yp = y.v.data() + static_cast<size_t>(in) * out_f_;
      for (int of = 0; of < out_f_; ++of) {
        const float* wp = weight_.value.data() + static_cast<size_t>(of) * in_f_;
        double s = bias_.value[of];
        for (int i = 0; i < in_f_; ++i) s += static_cast<double>(wp[i]) * xp[i];
        yp[of] = static_cast<float>(s);
      }
    }
    return y;
  }
  Tensor backward(const Tensor& gy) override {
    Tensor gx(x_.n, x_.c, x_.h, x_.w);
    for (int in = 0; in < x_.n; ++in) {
      const float* xp = x_.v.data() + static_cast<size_t>(in) * in_f_;
      const float* gp = gy.v.data() + static_cast<size_t>(in) * out_f_;
      float* gxp = gx.v.data() + static_cast<size_t>(in) * in_f_;
      for (int of = 0; of < out_f_; ++of) {
        const float g = gp[of];
        bias_.grad[of] += g;
        const float* wp = weight_.value.data() + static_cast<size_t>(of) * in_f_;
        float* wg = weight_.grad.data() + static_cast<size_t>(of) * in_f_;
        for (int i = 0; i < in_f_; ++i) {
          wg[i] += g * xp[i];
          gxp[i] += g * wp[i];
        }
      }
    }
    return gx;
  }
  std::vector<Param*> params() override { return {&weight_, &bias_}; }
  json spec() const override { return {{"type", "dense"}, {"in", in_f_}, {"out", out_f_}}; }
  int fan_in() const { return in_f_; }

 private:
  int in_f_, out_f_;
  Param weight_, bias_;
  Tensor x_;
};

// Inverted dropout; draws from the rng stream handed over by the net so a
// fixed seed gives a fixed mask sequence.
class Dropout : public Layer {
 public:
  explicit Dropout(double rate) : rate_(rate) {
    if (rate < 0.0 || rate >= 1.0) throw UsageError("dropout: rate outside [0,1)");
  }
  void attach_rng(Rng* rng) { rng_ = rng; }
  Tensor forward(const Tensor& x, bool training) override {
    if (!training || rate_ == 0.0) {
      mask_.clear();
      return x;
    }
    if (rng_ == nullptr) throw UsageError("dropout: rng not attached");
    Tensor y = x;
    mask_.assign(x.size(), 1.0f);
    const float scale = 1.0f / static_cast<float>(1.0 - rate_);
    for (size_t i = 0; i < y.v.size(); ++i) {
      if (rng_->uniform() < rate_) {
        mask_[i] = 0.0f;
        y.v[i] = 0.0f;
      } else {
        mask_[i] = scale;
        y.v[i] *= scale;
      }
    }
    return y;
  }
  Tensor backward(const Tensor& gy) override {
    if (mask_.empty()) return gy;
    Tensor gx = gy;
    for (size_t i = 0; i < gx.v.size(); ++i) gx.v[i] *= mask_[i];
    return gx;
  }
  json spec() const override { return {{"type", "dropout"}, {"rate", rate_}}; }

 private:
  double rate_;
  Rng* rng_ = nullptr;
  std::vector<float> mask_;
};

inline std::unique_ptr<Layer> layer_from_spec(const json& s) {
  const std::string type = s.at("type").get<std::string>();
  if (type == "conv")
    return std::make_unique<Conv2d>(s.at("in").get<int>(), s.at("out").get<int>(), s.at("k").get<int>(),
                                    s.at("stride").get<int>(), s.at("pad").get<int>());
  if (type == "relu") return std::make_unique<ReLU>();
  if (type == "maxpool") return std::make_unique<MaxPool2>();
  if (type == "gap") return std::make_unique<GlobalAvgPool>();
  if (type == "flatten") return std::make_unique<Flatten>();
  if (type == "dense") return std::make_unique<Dense>(s.at("in").get<int>(), s.at("out").get<int>());
  if (type == "dropout") return std::make_unique<Dropout>(s.at("rate").get<double>());
  throw UsageError("net: unknown layer type \"" + type + "\"");
}

class Net {
 public:
  Net() = default;
  Net(Net&&) = default;
  Net& operator=(Net&&) = default;
  Net(const Net&) = delete;
  Net& operator=(const Net&) = delete;

  void add(std::unique_ptr<Layer> l) {
    if (auto* d = dynamic_cast<Dropout*>(l.get())) d->attach_rng(&rng_);
    layers_.push_back(std::move(l));
  }
  void seed_dropout(uint64_t seed) { rng_ = Rng(seed); }

  Tensor forward(Tensor x, bool training) {
    for (auto& l : layers_) x = l->forward(x, training);
    return x;
  }
  Tensor backward(Tensor g) {
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }
  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (auto& l : layers_)
      for (Param* p : l->params()) out.push_back(p);
    return out;
  }
  void zero_grad() {
    for (Param* p : params()) p->zero_grad();
  }
  size_t param_count() {
    size_t total = 0;
    for (Param* p : params()) total += p->value.size();
    return total;
  }
  json arch() const {
    json a = json::array();
    for (const auto& l : layers_) a.push_back(l->spec());
    return a;
  }
  const std::vector<std::unique_ptr<Layer>>& layers() const { return layers_; }

  // He-normal weights, zero biases.
  void init(uint64_t seed) {
    Rng rng(seed);
    for (auto& l : layers_) {
      int fan = 0;
      if (auto* c = dynamic_cast<Conv2d*>(l.get())) fan = c->fan_in();
      else if (auto* d = dynamic_cast<Dense*>(l.get())) fan = d->fan_in();
      else continue;
      auto ps = l->params();
      const double sd = std::sqrt(2.0 / fan);
      for (auto& v : ps[0]->value) v = static_cast<float>(rng.normal() * sd);
      std::fill(ps[1]->value.begin(), ps[1]->value.end(), 0.0f);
    }
  }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
  Rng rng_{0x6b78722d6e6eULL};
};

inline Net net_from_arch(const json& arch) {
  if (!arch.is_array()) throw IntegrityError("net: arch must be an array");
  Net net;
  for (const auto& s : arch) net.add(layer_from_spec(s));
  return net;
}

}  // namespace kxr::nn
