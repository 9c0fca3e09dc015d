#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "weakseg/rng.hpp"
#include "weakseg/tensor.hpp"

namespace weakseg {

enum class PaddingMode : std::uint8_t { Zero = 0, Periodic = 1 };

struct NetworkConfig {
  int in_channels = 2;
  int base_filters = 8;
  int depth = 2;   // number of downsample stages
  int kernel = 3;  // odd
  std::uint64_t seed = 1;
  PaddingMode padding = PaddingMode::Zero;

  void validate() const {
    if (in_channels < 1 || base_filters < 1 || depth < 1)
      throw std::invalid_argument("NetworkConfig: non-positive sizes");
    if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("NetworkConfig: kernel must be odd");
  }
  int pool_factor() const { return 1 << depth; }
};

template <typename T>
struct ConvParams {
  int in_ch = 0, out_ch = 0, k = 1;
  std::vector<T> w;  // [out][in][ky][kx]
  std::vector<T> b;  // [out]

  void resize(int ic, int oc, int kk) {
    in_ch = ic;
    out_ch = oc;
    k = kk;
    w.assign(static_cast<std::size_t>(oc) * ic * kk * kk, T(0));
    b.assign(static_cast<std::size_t>(oc), T(0));
  }
  T& at(int o, int c, int ky, int kx) {
    return w[((static_cast<std::size_t>(o) * in_ch + c) * k + ky) * k + kx];
  }
  const T& at(int o, int c, int ky, int kx) const {
    return w[((static_cast<std::size_t>(o) * in_ch + c) * k + ky) * k + kx];
  }
};

namespace detail {

template <typename T>
void conv_forward(const ConvParams<T>& cp, const Volume<T>& x, Volume<T>& y, PaddingMode pad) {
  const int h = x.height, w = x.width, r = cp.k / 2;
  if (x.channels != cp.in_ch) throw std::invalid_argument("conv_forward: channel mismatch");
  y = Volume<T>(cp.out_ch, h, w);
  for (int o = 0; o < cp.out_ch; ++o) {
    T* yp = y.plane(o);
    const T bias = cp.b[static_cast<std::size_t>(o)];
    for (std::size_t i = 0; i < y.plane_size(); ++i) yp[i] = bias;
    for (int c = 0; c < cp.in_ch; ++c) {
      const T* xp = x.plane(c);
      for (int ky = 0; ky < cp.k; ++ky) {
        const int dy = ky - r;
        for (int kx = 0; kx < cp.k; ++kx) {
          const int dx = kx - r;
          const T wv = cp.at(o, c, ky, kx);
          if (wv == T(0)) continue;
          if (pad == PaddingMode::Zero) {
            const int i0 = std::max(0, -dy), i1 = h - std::max(0, dy);
            const int j0 = std::max(0, -dx), j1 = w - std::max(0, dx);
            for (int i = i0; i < i1; ++i) {
              T* yr = yp + static_cast<std::size_t>(i) * w;
              const T* xr = xp + static_cast<std::size_t>(i + dy) * w + dx;
              for (int j = j0; j < j1; ++j) yr[j] += wv * xr[j];
            }
          } else {
            for (int i = 0; i < h; ++i) {
              const int si = ((i + dy) % h + h) % h;
              T* yr = yp + static_cast<std::size_t>(i) * w;
              const T* xr = xp + static_cast<std::size_t>(si) * w;
              for (int j = 0; j < w; ++j) {
                const int sj = ((j + dx) % w + w) % w;
                yr[j] += wv * xr[sj];
              }
            }
          }
        }
      }
    }
  }
}

// Accumulates dW/db into `grad` and writes the input gradient to dx.
template <typename T>
void conv_backward(const ConvParams<T>& cp, const Volume<T>& x, const Volume<T>& dy,
                   ConvParams<T>& grad, Volume<T>& dx, PaddingMode pad) {
  const int h = x.height, w = x.width, r = cp.k / 2;
  dx = Volume<T>(cp.in_ch, h, w, T(0));
  for (int o = 0; o < cp.out_ch; ++o) {
    const T* dyp = dy.plane(o);
    T db = T(0);
    for (std::size_t i = 0; i < dy.plane_size(); ++i) db += dyp[i];
    grad.b[static_cast<std::size_t>(o)] += db;
    for (int c = 0; c < cp.in_ch; ++c) {
      const T* xp = x.plane(c);
      T* dxp = dx.plane(c);
      for (int ky = 0; ky < cp.k; ++ky) {
        const int dyo = ky - r;
        for (int kx = 0; kx < cp.k; ++kx) {
          const int dxo = kx - r;
          const T wv = cp.at(o, c, ky, kx);
          T dw = T(0);
          if (pad == PaddingMode::Zero) {
            const int i0 = std::max(0, -dyo), i1 = h - std::max(0, dyo);
            const int j0 = std::max(0, -dxo), j1 = w - std::max(0, dxo);
            for (int i = i0; i < i1; ++i) {
              const T* dyr = dyp + static_cast<std::size_t>(i) * w;
              const T* xr = xp + static_cast<std::size_t>(i + dyo) * w + dxo;
              T* dxr = dxp + static_cast<std::size_t>(i + dyo) * w + dxo;
              for (int j = j0; j < j1; ++j) {
                dw += dyr[j] * xr[j];
                dxr[j] += wv * dyr[j];
              }
            }
          } else {
            for (int i = 0; i < h; ++i) {
              const int si = ((i + dyo) % h + h) % h;
              const T* dyr = dyp + static_cast<std::size_t>(i) * w;
              const T* xr = xp + static_cast<std::size_t>(si) * w;
              T* dxr = dxp + static_cast<std::size_t>(si) * w;
              for (int j = 0; j < w; ++j) {
                const int sj = ((j + dxo) % w + w) % w;
                dw += dyr[j] * xr[sj];
                dxr[sj] += wv * dyr[j];
              }
            }
          }
          grad.at(o, c, ky, kx) += dw;
        }
      }
    }
  }
}

template <typename T>
Volume<T> avgpool2(const Volume<T>& x) {
  if (x.height % 2 || x.width % 2) throw std::invalid_argument("avgpool2: odd input size");
  Volume<T> y(x.channels, x.height / 2, x.width / 2);
  for (int c = 0; c < x.channels; ++c)
    for (int i = 0; i < y.height; ++i)
      for (int j = 0; j < y.width; ++j)
        y.at(c, i, j) = (x.at(c, 2 * i, 2 * j) + x.at(c, 2 * i, 2 * j + 1) +
                         x.at(c, 2 * i + 1, 2 * j) + x.at(c, 2 * i + 1, 2 * j + 1)) /
                        T(4);
  return y;
}

template <typename T>
Volume<T> avgpool2_backward(const Volume<T>& dy) {
  Volume<T> dx(dy.channels, dy.height * 2, dy.width * 2);
  for (int c = 0; c < dy.channels; ++c)
    for (int i = 0; i < dy.height; ++i)
      for (int j = 0; j < dy.width; ++j) {
        const T g = dy.at(c, i, j) / T(4);
        dx.at(c, 2 * i, 2 * j) = g;
        dx.at(c, 2 * i, 2 * j + 1) = g;
        dx.at(c, 2 * i + 1, 2 * j) = g;
        dx.at(c, 2 * i + 1, 2 * j + 1) = g;
      }
  return dx;
}

template <typename T>
Volume<T> upsample2(const Volume<T>& x) {
  Volume<T> y(x.channels, x.height * 2, x.width * 2);
  for (int c = 0; c < x.channels; ++c)
    for (int i = 0; i < x.height; ++i)
      for (int j = 0; j < x.width; ++j) {
        const T v = x.at(c, i, j);
        y.at(c, 2 * i, 2 * j) = v;
        y.at(c, 2 * i, 2 * j + 1) = v;
        y.at(c, 2 * i + 1, 2 * j) = v;
        y.at(c, 2 * i + 1, 2 * j + 1) = v;
      }
  return y;
}

template <typename T>
Volume<T> upsample2_backward(const Volume<T>& dy) {
  Volume<T> dx(dy.channels, dy.height / 2, dy.width / 2);
  for (int c = 0; c < dy.channels; ++c)
    for (int i = 0; i < dx.height; ++i)
      for (int j = 0; j < dx.width; ++j)
        dx.at(c, i, j) = dy.at(c, 2 * i, 2 * j) + dy.at(c, 2 * i, 2 * j + 1) +
                         dy.at(c, 2 * i + 1, 2 * j) + dy.at(c, 2 * i + 1, 2 * j + 1);
  return dx;
}

template <typename T>
Volume<T> relu(const Volume<T>& x) {
  Volume<T> y = x;
  for (auto& v : y.v) v = v > T(0) ? v : T(0);
  return y;
}

// dy masked by the stored pre-activation.
template <typename T>
Volume<T> relu_backward(const Volume<T>& pre, const Volume<T>& dy) {
  Volume<T> dx = dy;
  for (std::size_t i = 0; i < dx.v.size(); ++i)
    if (!(pre.v[i] > T(0))) dx.v[i] = T(0);
  return dx;
}

}  // namespace detail

// Activations retained for the backward pass.
template <typename T>
struct ForwardContext {
  std::vector<Volume<T>> conv_in;   // input fed to each conv, by layer index
  std::vector<Volume<T>> pre_act;   // conv output before relu ({} for the head)
};

template <typename T>
struct Gradients {
  std::vector<ConvParams<T>> layers;

  double squared_norm() const {
    double s = 0.0;
    for (const auto& l : layers) {
      for (const auto& v : l.w) s += static_cast<double>(v) * static_cast<double>(v);
      for (const auto& v : l.b) s += static_cast<double>(v) * static_cast<double>(v);
    }
    return s;
  }
  void scale(double f) {
    for (auto& l : layers) {
      for (auto& v : l.w) v = static_cast<T>(v * f);
      for (auto& v : l.b) v = static_cast<T>(v * f);
    }
  }
  void add(const Gradients& o) {
    for (std::size_t li = 0; li < layers.size(); ++li) {
      for (std::size_t i = 0; i < layers[li].w.size(); ++i) layers[li].w[i] += o.layers[li].w[i];
      for (std::size_t i = 0; i < layers[li].b.size(); ++i) layers[li].b[i] += o.layers[li].b[i];
    }
  }
};

struct TrainStep {
  double learning_rate = 0.05;
  int batch_size = 8;
  double momentum = 0.0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainStep: learning rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("TrainStep: batch size must be >= 1");
  }
};

inline constexpr double kGradClipNorm = 5.0;
inline constexpr char kCheckpointMagic[4] = {'N', 'W', 'T', '1'};

// Fully convolutional encoder-decoder with additive skip connections:
// per stage conv(k)+relu then 2x2 average pool; a bottleneck conv; per
// decoder stage nearest upsample, conv(k)+relu, plus the encoder skip; a
// final 1x1 conv to 2 logit channels. Output size equals input size for any
// input divisible by 2^depth.
template <typename T>
class SegNet {
 public:
  SegNet() = default;

  explicit SegNet(const NetworkConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    layers_.resize(layer_count(cfg.depth));
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const auto [ic, oc, k] = layer_shape(static_cast<int>(li));
      layers_[li].resize(ic, oc, k);
    }
    Rng rng(cfg.seed);
    for (auto& l : layers_) {
      const double bound = std::sqrt(3.0 / (static_cast<double>(l.in_ch) * l.k * l.k));
      for (auto& v : l.w) v = static_cast<T>(rng.uniform(-bound, bound));
      // biases start at zero
    }
  }

  const NetworkConfig& config() const { return cfg_; }
  const std::vector<ConvParams<T>>& layers() const { return layers_; }
  std::vector<ConvParams<T>>& layers() { return layers_; }

  static int layer_count(int depth) { return 2 * depth + 2; }

  Gradients<T> zero_gradients() const {
    Gradients<T> g;
    g.layers.resize(layers_.size());
    for (std::size_t li = 0; li < layers_.size(); ++li)
      g.layers[li].resize(layers_[li].in_ch, layers_[li].out_ch, layers_[li].k);
    return g;
  }

  LogitMap<T> forward(const Volume<T>& input) const {
    ForwardContext<T> ctx;
    return forward(input, ctx);
  }

  LogitMap<T> forward(const Volume<T>& input, ForwardContext<T>& ctx) const {
    check_input(input);
    const int d = cfg_.depth;
    ctx.conv_in.assign(layers_.size(), {});
    ctx.pre_act.assign(layers_.size(), {});
    std::vector<Volume<T>> enc(static_cast<std::size_t>(d));

    Volume<T> cur = input;
    for (int s = 0; s < d; ++s) {
      ctx.conv_in[enc_idx(s)] = cur;
      Volume<T> z;
      detail::conv_forward(layers_[enc_idx(s)], cur, z, cfg_.padding);
      ctx.pre_act[enc_idx(s)] = z;
      enc[static_cast<std::size_t>(s)] = detail::relu(z);
      cur = detail::avgpool2(enc[static_cast<std::size_t>(s)]);
    }
    ctx.conv_in[bott_idx()] = cur;
    Volume<T> zb;
    detail::conv_forward(layers_[bott_idx()], cur, zb, cfg_.padding);
    ctx.pre_act[bott_idx()] = zb;
    cur = detail::relu(zb);
    for (int s = d - 1; s >= 0; --s) {
      Volume<T> up = detail::upsample2(cur);
      ctx.conv_in[dec_idx(s)] = up;
      Volume<T> z;
      detail::conv_forward(layers_[dec_idx(s)], up, z, cfg_.padding);
      ctx.pre_act[dec_idx(s)] = z;
      Volume<T> t = detail::relu(z);
      const Volume<T>& skip = enc[static_cast<std::size_t>(s)];
      for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] += skip.v[i];
      cur = std::move(t);
    }
    ctx.conv_in[out_idx()] = cur;
    Volume<T> logits;
    detail::conv_forward(layers_[out_idx()], cur, logits, cfg_.padding);
    return logits;
  }

  // Parameter gradients for the upstream dL/dlogits; optionally the input
  // gradient as well.
  Gradients<T> backward(const ForwardContext<T>& ctx, const Volume<T>& dlogits,
                        Volume<T>* dinput = nullptr) const {
    Gradients<T> g = zero_gradients();
    accumulate_backward(ctx, dlogits, g, dinput);
    return g;
  }

  void accumulate_backward(const ForwardContext<T>& ctx, const Volume<T>& dlogits, Gradients<T>& g,
                           Volume<T>* dinput = nullptr) const {
    const int d = cfg_.depth;
    Volume<T> dcur;
    detail::conv_backward(layers_[out_idx()], ctx.conv_in[out_idx()], dlogits, g.layers[out_idx()],
                          dcur, cfg_.padding);
    // dcur now holds the gradient at each decoder stage's (conv+relu)+skip sum
    std::vector<Volume<T>> denc(static_cast<std::size_t>(d));
    for (int s = 0; s < d; ++s) {
      denc[static_cast<std::size_t>(s)] = dcur;  // skip branch
      Volume<T> dz = detail::relu_backward(ctx.pre_act[dec_idx(s)], dcur);
      Volume<T> dup;
      detail::conv_backward(layers_[dec_idx(s)], ctx.conv_in[dec_idx(s)], dz, g.layers[dec_idx(s)],
                            dup, cfg_.padding);
      dcur = detail::upsample2_backward(dup);
    }
    Volume<T> dzb = detail::relu_backward(ctx.pre_act[bott_idx()], dcur);
    detail::conv_backward(layers_[bott_idx()], ctx.conv_in[bott_idx()], dzb, g.layers[bott_idx()],
                          dcur, cfg_.padding);
    for (int s = d - 1; s >= 0; --s) {
      Volume<T> de = detail::avgpool2_backward(dcur);
      for (std::size_t i = 0; i < de.v.size(); ++i) de.v[i] += denc[static_cast<std::size_t>(s)].v[i];
      Volume<T> dz = detail::relu_backward(ctx.pre_act[enc_idx(s)], de);
      detail::conv_backward(layers_[enc_idx(s)], ctx.conv_in[enc_idx(s)], dz, g.layers[enc_idx(s)],
                            dcur, cfg_.padding);
    }
    if (dinput) *dinput = std::move(dcur);
  }

  // Half the receptive-field extent, in input pixels; how far one output
  // pixel can see. Tile halos use this.
  int receptive_field_radius() const {
    long rf = 1, jump = 1;
    for (int s = 0; s < cfg_.depth; ++s) {
      rf += static_cast<long>(cfg_.kernel - 1) * jump;  // encoder conv
      rf += jump;                                       // 2x2 pool
      jump *= 2;
    }
    rf += static_cast<long>(cfg_.kernel - 1) * jump;  // bottleneck
    for (int s = cfg_.depth - 1; s >= 0; --s) {
      jump /= 2;
      rf += static_cast<long>(cfg_.kernel - 1) * jump;  // decoder conv
    }
    return static_cast<int>(rf / 2);
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for write: " + path.string());
    f.write(kCheckpointMagic, 4);
    write_u32(f, 1);
    write_i32(f, cfg_.in_channels);
    write_i32(f, cfg_.base_filters);
    write_i32(f, cfg_.depth);
    write_i32(f, cfg_.kernel);
    write_u64(f, cfg_.seed);
    f.put(static_cast<char>(cfg_.padding));
    write_u32(f, static_cast<std::uint32_t>(layers_.size() * 2));
    for (const auto& l : layers_) {
      write_tensor(f, l.w);
      write_tensor(f, l.b);
    }
    if (!f) throw std::runtime_error("checkpoint write failed: " + path.string());
  }

  static SegNet load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0)
      throw std::runtime_error("not a checkpoint file: " + path.string());
    if (read_u32(f) != 1) throw std::runtime_error("unsupported checkpoint version");
    NetworkConfig cfg;
    cfg.in_channels = read_i32(f);
    cfg.base_filters = read_i32(f);
    cfg.depth = read_i32(f);
    cfg.kernel = read_i32(f);
    cfg.seed = read_u64(f);
    cfg.padding = static_cast<PaddingMode>(f.get());
    SegNet net(cfg);
    const auto n_tensors = read_u32(f);
    if (n_tensors != net.layers_.size() * 2) throw std::runtime_error("checkpoint tensor count mismatch");
    for (auto& l : net.layers_) {
      read_tensor(f, l.w);
      read_tensor(f, l.b);
    }
    if (!f) throw std::runtime_error("truncated checkpoint: " + path.string());
    return net;
  }

  friend bool operator==(const SegNet& a, const SegNet& b) {
    if (a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t i = 0; i < a.layers_.size(); ++i)
      if (a.layers_[i].w != b.layers_[i].w || a.layers_[i].b != b.layers_[i].b) return false;
    return true;
  }

 private:
  int enc_idx(int s) const { return s; }
  int bott_idx() const { return cfg_.depth; }
  int dec_idx(int s) const { return 2 * cfg_.depth - s; }  // s = depth-1 .. 0
  int out_idx() const { return 2 * cfg_.depth + 1; }

  // (in_ch, out_ch, kernel) per layer index, declaration order:
  // enc 0..depth-1, bottleneck, dec depth-1..0, output head.
  std::tuple<int, int, int> layer_shape(int li) const {
    const int d = cfg_.depth, f = cfg_.base_filters;
    if (li < d) {
      const int ic = li == 0 ? cfg_.in_channels : f << (li - 1);
      return {ic, f << li, cfg_.kernel};
    }
    if (li == d) {
      const int ch = f << (d - 1);
      return {ch, ch, cfg_.kernel};
    }
    if (li <= 2 * d) {
      const int s = 2 * d - li;  // decoder stage
      const int ic = s == d - 1 ? (f << (d - 1)) : (f << (s + 1));
      return {ic, f << s, cfg_.kernel};
    }
    return {f, 2, 1};
  }

  void check_input(const Volume<T>& in) const {
    if (in.channels != cfg_.in_channels) throw std::invalid_argument("forward: channel mismatch");
    const int pf = cfg_.pool_factor();
    if (in.height % pf || in.width % pf)
      throw std::invalid_argument("forward: input size must be divisible by 2^depth");
    if (in.height < pf || in.width < pf) throw std::invalid_argument("forward: input too small");
  }

  static void write_u32(std::ostream& f, std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
  static void write_i32(std::ostream& f, std::int32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
  static void write_u64(std::ostream& f, std::uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
  static std::uint32_t read_u32(std::istream& f) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  }
  static std::int32_t read_i32(std::istream& f) {
    std::int32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  }
  static std::uint64_t read_u64(std::istream& f) {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    return v;
  }
  static void write_tensor(std::ostream& f, const std::vector<T>& t) {
    write_u64(f, t.size());
    for (const T v : t) {
      const float fv = static_cast<float>(v);
      f.write(reinterpret_cast<const char*>(&fv), 4);
    }
  }
  static void read_tensor(std::istream& f, std::vector<T>& t) {
    const auto n = read_u64(f);
    if (n != t.size()) throw std::runtime_error("checkpoint tensor size mismatch");
    for (auto& v : t) {
      float fv = 0;
      f.read(reinterpret_cast<char*>(&fv), 4);
      v = static_cast<T>(fv);
    }
  }

  NetworkConfig cfg_;
  std::vector<ConvParams<T>> layers_;
};

// Plain SGD with optional momentum and a global gradient-norm clip.
template <typename T>
struct SgdState {
  std::vector<ConvParams<T>> velocity;
};

template <typename T>
void sgd_step(SegNet<T>& net, const Gradients<T>& grads, const TrainStep& step, SgdState<T>& state) {
  step.validate();
  Gradients<T> g = grads;
  const double norm = std::sqrt(g.squared_norm());
  if (norm > kGradClipNorm) g.scale(kGradClipNorm / norm);
  auto& layers = net.layers();
  if (state.velocity.empty() && step.momentum != 0.0) {
    state.velocity.resize(layers.size());
    for (std::size_t li = 0; li < layers.size(); ++li)
      state.velocity[li].resize(layers[li].in_ch, layers[li].out_ch, layers[li].k);
  }
  const T lr = static_cast<T>(step.learning_rate);
  for (std::size_t li = 0; li < layers.size(); ++li) {
    auto& l = layers[li];
    const auto& gl = g.layers[li];
    if (step.momentum != 0.0) {
      auto& v = state.velocity[li];
      const T mu = static_cast<T>(step.momentum);
      for (std::size_t i = 0; i < l.w.size(); ++i) {
        v.w[i] = mu * v.w[i] + gl.w[i];
        l.w[i] -= lr * v.w[i];
      }
      for (std::size_t i = 0; i < l.b.size(); ++i) {
        v.b[i] = mu * v.b[i] + gl.b[i];
        l.b[i] -= lr * v.b[i];
      }
    } else {
      for (std::size_t i = 0; i < l.w.size(); ++i) l.w[i] -= lr * gl.w[i];
      for (std::size_t i = 0; i < l.b.size(); ++i) l.b[i] -= lr * gl.b[i];
    }
  }
}

}  // namespace weakseg
