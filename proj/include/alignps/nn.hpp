#pragma once

#include <string>

#include "alignps/autodiff.hpp"
#include "alignps/conv.hpp"
#include "alignps/dconv.hpp"
#include "alignps/ops.hpp"
#include "alignps/random.hpp"

namespace alignps {

template <typename T>
TensorT<T> normal_init(Rng &rng, std::vector<int> shape, T stddev) {
  TensorT<T> t(std::move(shape));
  T *p = t.data();
  const std::int64_t n = t.numel();
  for (std::int64_t i = 0; i < n; ++i) p[i] = static_cast<T>(rng.normal()) * stddev;
  return t;
}

/// Plain conv layer with He-normal weight init.
template <typename T>
struct Conv2dLayer {
  Var<T> weight, bias;
  int stride = 1, pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(int cin, int cout, int k, int stride_, int pad_, Rng &rng, T weight_std = T(-1),
              T bias_init = T(0))
      : stride(stride_), pad(pad_) {
    const T std_w =
        weight_std > T(0) ? weight_std : std::sqrt(T(2) / static_cast<T>(cin * k * k));
    weight = make_leaf<T>(normal_init<T>(rng, {cout, cin, k, k}, std_w));
    bias = make_leaf<T>(TensorT<T>::full({cout}, bias_init));
  }

  Var<T> forward(const Var<T> &x) const { return conv2d<T>(x, weight, bias, stride, pad); }

  void register_params(const std::string &prefix, ParamSet<T> &ps) {
    ps.add(prefix + ".weight", weight);
    ps.add(prefix + ".bias", bias);
  }
};

/// 3x3 deformable conv layer. The offset predictor is a plain 3x3 conv whose
/// weights and bias start at zero, so the layer behaves exactly like its
/// plain counterpart at initialization. The main weight consumes the same
/// RNG draws as a plain 3x3 conv, which keeps deform/plain model variants
/// weight-identical at construction.
template <typename T>
struct DeformConv2dLayer {
  Var<T> weight, bias;
  Var<T> offset_weight, offset_bias;

  DeformConv2dLayer() = default;
  DeformConv2dLayer(int cin, int cout, Rng &rng, T weight_std = T(-1)) {
    const T std_w = weight_std > T(0) ? weight_std : std::sqrt(T(2) / static_cast<T>(cin * 9));
    weight = make_leaf<T>(normal_init<T>(rng, {cout, cin, 3, 3}, std_w));
    bias = make_leaf<T>(TensorT<T>::zeros({cout}));
    offset_weight = make_leaf<T>(TensorT<T>::zeros({18, cin, 3, 3}));
    offset_bias = make_leaf<T>(TensorT<T>::zeros({18}));
  }

  Var<T> forward(const Var<T> &x) const {
    Var<T> offsets = conv2d<T>(x, offset_weight, offset_bias, 1, 1);
    return deform_conv2d<T>(x, weight, offsets, bias);
  }

  void register_params(const std::string &prefix, ParamSet<T> &ps) {
    ps.add(prefix + ".weight", weight);
    ps.add(prefix + ".bias", bias);
    ps.add(prefix + ".offset_weight", offset_weight);
    ps.add(prefix + ".offset_bias", offset_bias);
  }
};

/// Either a plain 3x3 conv or a deformable 3x3 conv, selected at build time.
/// Both keep spatial size (stride 1, pad 1).
template <typename T>
struct Conv3x3OrDeform {
  bool deform = false;
  Conv2dLayer<T> plain;
  DeformConv2dLayer<T> dcn;

  Conv3x3OrDeform() = default;
  Conv3x3OrDeform(int cin, int cout, bool deform_, Rng &rng) : deform(deform_) {
    if (deform)
      dcn = DeformConv2dLayer<T>(cin, cout, rng);
    else
      plain = Conv2dLayer<T>(cin, cout, 3, 1, 1, rng);
  }

  Var<T> forward(const Var<T> &x) const { return deform ? dcn.forward(x) : plain.forward(x); }

  void register_params(const std::string &prefix, ParamSet<T> &ps) {
    if (deform)
      dcn.register_params(prefix, ps);
    else
      plain.register_params(prefix, ps);
  }
};

inline int gn_groups_for(int channels) {
  for (int g : {32, 16, 8, 4, 2})
    if (channels % g == 0 && channels / g >= 4) return g;
  return 1;
}

template <typename T>
struct GroupNormLayer {
  Var<T> gamma, beta;
  int groups = 1;

  GroupNormLayer() = default;
  explicit GroupNormLayer(int channels, int groups_ = 0)
      : groups(groups_ > 0 ? groups_ : gn_groups_for(channels)) {
    gamma = make_leaf<T>(TensorT<T>::full({channels}, T(1)));
    beta = make_leaf<T>(TensorT<T>::zeros({channels}));
  }

  Var<T> forward(const Var<T> &x) const { return group_norm<T>(x, gamma, beta, groups); }

  void register_params(const std::string &prefix, ParamSet<T> &ps) {
    ps.add(prefix + ".gamma", gamma);
    ps.add(prefix + ".beta", beta);
  }
};

/// conv + GN + ReLU block used by the backbone stages and head towers.
template <typename T>
struct ConvBlock {
  Conv2dLayer<T> conv;
  GroupNormLayer<T> gn;

  ConvBlock() = default;
  ConvBlock(int cin, int cout, int k, int stride, int pad, Rng &rng)
      : conv(cin, cout, k, stride, pad, rng), gn(cout) {}

  Var<T> forward(const Var<T> &x) const { return relu(gn.forward(conv.forward(x))); }

  void register_params(const std::string &prefix, ParamSet<T> &ps) {
    conv.register_params(prefix + ".conv", ps);
    gn.register_params(prefix + ".gn", ps);
  }
};

/// 3x3-or-deform conv + GN + ReLU, for backbone stages with a deformable slot.
template <typename T>
struct DeformableBlock {
  Conv3x3OrDeform<T> conv;
  GroupNormLayer<T> gn;

  DeformableBlock() = default;
  DeformableBlock(int cin, int cout, bool deform, Rng &rng) : conv(cin, cout, deform, rng), gn(cout) {}

  Var<T> forward(const Var<T> &x) const { return relu(gn.forward(conv.forward(x))); }

  void register_params(const std::string &prefix, ParamSet<T> &ps) {
    conv.register_params(prefix + ".conv", ps);
    gn.register_params(prefix + ".gn", ps);
  }
};

}  // namespace alignps
