#pragma once

#include <string>

#include "alignps/nn.hpp"

namespace alignps {

enum class BackboneVariant { kTiny, kResNet50Like };

struct BackboneConfig {
  BackboneVariant variant = BackboneVariant::kTiny;
  // Output channels of the three exported stages (strides 8/16/32).
  int c3 = 32, c4 = 64, c5 = 128;
  // Replace the 3x3 conv inside the named stage with a deformable conv.
  bool deform_res3 = false, deform_res4 = false, deform_res5 = false;
};

inline BackboneConfig resnet50_like_config() {
  BackboneConfig cfg;
  cfg.variant = BackboneVariant::kResNet50Like;
  cfg.c3 = 512;
  cfg.c4 = 1024;
  cfg.c5 = 2048;
  return cfg;
}

template <typename T>
struct BackboneOut {
  Var<T> c3, c4, c5;  // strides 8, 16, 32
};

/// Bottleneck residual block: 1x1 reduce, 3x3 (optionally deformable) with
/// the stage's stride, 1x1 expand, plus a strided 1x1 projection shortcut.
template <typename T>
struct Bottleneck {
  Conv2dLayer<T> reduce, expand, shortcut;
  Conv3x3OrDeform<T> mid;           // used when stride == 1
  Conv2dLayer<T> mid_strided;       // used when stride == 2 (never deformable)
  GroupNormLayer<T> gn1, gn2, gn3, gn_sc;
  int stride = 1;

  Bottleneck() = default;
  Bottleneck(int cin, int cmid, int cout, int stride_, bool deform, Rng &rng) : stride(stride_) {
    reduce = Conv2dLayer<T>(cin, cmid, 1, 1, 0, rng);
    gn1 = GroupNormLayer<T>(cmid);
    if (stride == 1) {
      mid = Conv3x3OrDeform<T>(cmid, cmid, deform, rng);
    } else {
      APS_CHECK(!deform, "Bottleneck: deformable slot requires stride 1");
      mid_strided = Conv2dLayer<T>(cmid, cmid, 3, 2, 1, rng);
    }
    gn2 = GroupNormLayer<T>(cmid);
    expand = Conv2dLayer<T>(cmid, cout, 1, 1, 0, rng);
    gn3 = GroupNormLayer<T>(cout);
    shortcut = Conv2dLayer<T>(cin, cout, 1, stride, 0, rng);
    gn_sc = GroupNormLayer<T>(cout);
  }

  Var<T> forward(const Var<T> &x) const {
    Var<T> h = relu(gn1.forward(reduce.forward(x)));
    h = stride == 1 ? mid.forward(h) : mid_strided.forward(h);
    h = relu(gn2.forward(h));
    h = gn3.forward(expand.forward(h));
    Var<T> sc = gn_sc.forward(shortcut.forward(x));
    return relu(add(h, sc));
  }

  void register_params(const std::string &p, ParamSet<T> &ps) {
    reduce.register_params(p + ".reduce", ps);
    gn1.register_params(p + ".gn1", ps);
    if (stride == 1)
      mid.register_params(p + ".mid", ps);
    else
      mid_strided.register_params(p + ".mid", ps);
    gn2.register_params(p + ".gn2", ps);
    expand.register_params(p + ".expand", ps);
    gn3.register_params(p + ".gn3", ps);
    shortcut.register_params(p + ".shortcut", ps);
    gn_sc.register_params(p + ".gn_sc", ps);
  }
};

/// Feature extractor producing stride-8/16/32 maps. All downsampling convs
/// are 3x3 stride-2 pad-1, so spatial dims follow ceil(x/2) per stage and no
/// input padding to a stride multiple is needed: 1500x900 input yields a
/// 113x188 stride-8 map.
///
/// kTiny: five conv+GN+ReLU stages (~0.3M params at default widths), one
/// extra 3x3 per exported stage acting as the deformable slot.
/// kResNet50Like: conv stem to stride 4, then one bottleneck per exported
/// stage at ResNet-50 widths (512/1024/2048). Depth is cut down for CPU
/// budgets; the stage interface (channels, strides, deformable slots)
/// matches the full-depth network. The deformable slot is the 3x3 of an
/// extra stride-1 bottleneck appended to the stage.
template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig &cfg, Rng &rng) : cfg_(cfg) {
    if (cfg.variant == BackboneVariant::kTiny) {
      const int s1 = std::max(8, cfg.c3 / 2), s2 = std::max(8, cfg.c3 / 2);
      stem1_ = ConvBlock<T>(3, s1, 3, 2, 1, rng);
      stem2_ = ConvBlock<T>(s1, s2, 3, 2, 1, rng);
      down3_ = ConvBlock<T>(s2, cfg.c3, 3, 2, 1, rng);
      refine3_ = DeformableBlock<T>(cfg.c3, cfg.c3, cfg.deform_res3, rng);
      down4_ = ConvBlock<T>(cfg.c3, cfg.c4, 3, 2, 1, rng);
      refine4_ = DeformableBlock<T>(cfg.c4, cfg.c4, cfg.deform_res4, rng);
      down5_ = ConvBlock<T>(cfg.c4, cfg.c5, 3, 2, 1, rng);
      refine5_ = DeformableBlock<T>(cfg.c5, cfg.c5, cfg.deform_res5, rng);
    } else {
      stem1_ = ConvBlock<T>(3, 64, 3, 2, 1, rng);
      stem2_ = ConvBlock<T>(64, 256, 3, 2, 1, rng);
      block3_ = Bottleneck<T>(256, cfg.c3 / 4, cfg.c3, 2, false, rng);
      refine3b_ = Bottleneck<T>(cfg.c3, cfg.c3 / 4, cfg.c3, 1, cfg.deform_res3, rng);
      block4_ = Bottleneck<T>(cfg.c3, cfg.c4 / 4, cfg.c4, 2, false, rng);
      refine4b_ = Bottleneck<T>(cfg.c4, cfg.c4 / 4, cfg.c4, 1, cfg.deform_res4, rng);
      block5_ = Bottleneck<T>(cfg.c4, cfg.c5 / 4, cfg.c5, 2, false, rng);
      refine5b_ = Bottleneck<T>(cfg.c5, cfg.c5 / 4, cfg.c5, 1, cfg.deform_res5, rng);
    }
  }

  BackboneOut<T> forward(const Var<T> &x) const {
    BackboneOut<T> out;
    Var<T> h = stem2_.forward(stem1_.forward(x));  // stride 4
    if (cfg_.variant == BackboneVariant::kTiny) {
      out.c3 = refine3_.forward(down3_.forward(h));
      out.c4 = refine4_.forward(down4_.forward(out.c3));
      out.c5 = refine5_.forward(down5_.forward(out.c4));
    } else {
      out.c3 = refine3b_.forward(block3_.forward(h));
      out.c4 = refine4b_.forward(block4_.forward(out.c3));
      out.c5 = refine5b_.forward(block5_.forward(out.c4));
    }
    return out;
  }

  void register_params(ParamSet<T> &ps) {
    stem1_.register_params("backbone.stem1", ps);
    stem2_.register_params("backbone.stem2", ps);
    if (cfg_.variant == BackboneVariant::kTiny) {
      down3_.register_params("backbone.down3", ps);
      refine3_.register_params("backbone.res3", ps);
      down4_.register_params("backbone.down4", ps);
      refine4_.register_params("backbone.res4", ps);
      down5_.register_params("backbone.down5", ps);
      refine5_.register_params("backbone.res5", ps);
    } else {
      block3_.register_params("backbone.res3a", ps);
      refine3b_.register_params("backbone.res3b", ps);
      block4_.register_params("backbone.res4a", ps);
      refine4b_.register_params("backbone.res4b", ps);
      block5_.register_params("backbone.res5a", ps);
      refine5b_.register_params("backbone.res5b", ps);
    }
  }

  const BackboneConfig &config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  ConvBlock<T> stem1_, stem2_;
  // tiny
  ConvBlock<T> down3_, down4_, down5_;
  DeformableBlock<T> refine3_, refine4_, refine5_;
  // resnet50-like
  Bottleneck<T> block3_, refine3b_, block4_, refine4b_, block5_, refine5b_;
};

}  // namespace alignps
