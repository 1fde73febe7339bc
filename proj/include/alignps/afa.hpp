#pragma once

#include <string>
#include <vector>

#include "alignps/backbone.hpp"
#include "alignps/nn.hpp"

namespace alignps {

enum class LateralKind { kPlain1x1, kDeform3x3 };
enum class FusionKind { kSum, kConcat };
enum class OutputKind { kPlain3x3, kDeform3x3 };
// P3 has stride 8; P4 16; P5 32. The single-level P4/P5 modes exist for the
// scale ablation; the production configuration is kP3Only.
enum class OutputLevels { kP3Only, kP4Only, kP5Only, kP3P4, kP3P4P5 };

struct AfaConfig {
  LateralKind lateral = LateralKind::kDeform3x3;
  FusionKind fusion = FusionKind::kConcat;
  OutputKind output = OutputKind::kDeform3x3;
  int out_channels = 256;
  OutputLevels levels = OutputLevels::kP3Only;
  // Box-size boundaries for multi-level assignment: extent <= range_p3 goes
  // to P3, <= range_p4 to P4, the rest to P5 (two-level mode uses range_p3
  // as the single boundary).
  float range_p3 = 128.f, range_p4 = 256.f;
};

inline int level_count(OutputLevels l) {
  switch (l) {
    case OutputLevels::kP3P4: return 2;
    case OutputLevels::kP3P4P5: return 3;
    default: return 1;
  }
}

inline int level_stride(OutputLevels mode, int idx) {
  switch (mode) {
    case OutputLevels::kP3Only: return 8;
    case OutputLevels::kP4Only: return 16;
    case OutputLevels::kP5Only: return 32;
    case OutputLevels::kP3P4: return idx == 0 ? 8 : 16;
    case OutputLevels::kP3P4P5: return idx == 0 ? 8 : (idx == 1 ? 16 : 32);
  }
  return 8;
}

/// Index into the emitted-level list for a box, chosen by the magnitude of
/// its center regression targets max(l,t,r,b) = max(w,h)/2 against the
/// configured ranges. Boundary values go to the finer level. Single-level
/// modes always return 0.
inline int assign_level(float box_width, float box_height, const AfaConfig &cfg) {
  if (level_count(cfg.levels) == 1) return 0;
  const float extent = 0.5f * std::max(box_width, box_height);
  if (cfg.levels == OutputLevels::kP3P4) return extent <= cfg.range_p3 ? 0 : 1;
  if (extent <= cfg.range_p3) return 0;
  if (extent <= cfg.range_p4) return 1;
  return 2;
}

/// Feature map pyramid produced by Afa::aggregate. Single-level configs emit
/// one entry; the scale-ablation configs emit two or three.
template <typename T>
struct PyramidLevel {
  Var<T> map;
  int stride = 8;
};

/// Aligned feature aggregation: lateral convs (1x1 plain or 3x3 deformable)
/// bring C3/C4/C5 to D channels, a top-down pathway fuses them by sum or
/// concatenation, and per-level output convs (plain or deformable 3x3) map
/// back to D. Laterals get a ReLU; output convs stay linear because their
/// result doubles as the raw re-id embedding field.
///
/// With concat fusion the fused map is 2D wide right before the output conv
/// at both P4 and P3; a linear 1x1 merge conv reduces the fused P4 back to D
/// before it continues down the pathway so the bookkeeping stays at lateral
/// width everywhere.
template <typename T>
class Afa {
 public:
  Afa() = default;
  Afa(const AfaConfig &cfg, const BackboneConfig &bb, Rng &rng) : cfg_(cfg) {
    APS_CHECK(cfg.out_channels > 0, "AfaConfig: out_channels must be positive");
    const int d = cfg.out_channels;
    const bool deform_lat = cfg.lateral == LateralKind::kDeform3x3;
    need_p3_ = cfg.levels != OutputLevels::kP4Only && cfg.levels != OutputLevels::kP5Only;
    need_p4_ = cfg.levels != OutputLevels::kP3Only && cfg.levels != OutputLevels::kP5Only;

    lat5_ = make_lateral(bb.c5, d, deform_lat, rng);
    if (need_p4_ || need_p3_) lat4_ = make_lateral(bb.c4, d, deform_lat, rng);
    if (need_p3_) lat3_ = make_lateral(bb.c3, d, deform_lat, rng);

    const bool concat = cfg.fusion == FusionKind::kConcat;
    const int fused = concat ? 2 * d : d;
    if (concat && need_p3_ && lat4_set()) merge4_ = Conv2dLayer<T>(fused, d, 1, 1, 0, rng);

    const bool deform_out = cfg.output == OutputKind::kDeform3x3;
    switch (cfg.levels) {
      case OutputLevels::kP3Only:
        out3_ = Conv3x3OrDeform<T>(fused, d, deform_out, rng);
        break;
      case OutputLevels::kP4Only:
        out4_ = Conv3x3OrDeform<T>(fused, d, deform_out, rng);
        break;
      case OutputLevels::kP5Only:
        out5_ = Conv3x3OrDeform<T>(d, d, deform_out, rng);
        break;
      case OutputLevels::kP3P4:
        out3_ = Conv3x3OrDeform<T>(fused, d, deform_out, rng);
        out4_ = Conv3x3OrDeform<T>(fused, d, deform_out, rng);
        break;
      case OutputLevels::kP3P4P5:
        out3_ = Conv3x3OrDeform<T>(fused, d, deform_out, rng);
        out4_ = Conv3x3OrDeform<T>(fused, d, deform_out, rng);
        out5_ = Conv3x3OrDeform<T>(d, d, deform_out, rng);
        break;
    }
  }

  std::vector<PyramidLevel<T>> aggregate(const BackboneOut<T> &bb) const {
    check_ratio(bb.c4, bb.c5, "C4/C5");
    check_ratio(bb.c3, bb.c4, "C3/C4");
    const bool concat = cfg_.fusion == FusionKind::kConcat;

    Var<T> t5 = relu(forward_lateral(lat5_, bb.c5));
    Var<T> f4, t4;
    if (need_p4_ || need_p3_) {
      Var<T> l4 = relu(forward_lateral(lat4_, bb.c4));
      Var<T> up5 = upsample2x_nearest(t5, l4->value.dim(2), l4->value.dim(3));
      f4 = concat ? concat_channels<T>({up5, l4}) : add(up5, l4);
      t4 = concat && need_p3_ ? merge4_.forward(f4) : f4;
    }
    Var<T> f3;
    if (need_p3_) {
      Var<T> l3 = relu(forward_lateral(lat3_, bb.c3));
      Var<T> up4 = upsample2x_nearest(t4, l3->value.dim(2), l3->value.dim(3));
      f3 = concat ? concat_channels<T>({up4, l3}) : add(up4, l3);
    }

    std::vector<PyramidLevel<T>> out;
    switch (cfg_.levels) {
      case OutputLevels::kP3Only:
        out.push_back({out3_.forward(f3), 8});
        break;
      case OutputLevels::kP4Only:
        out.push_back({out4_.forward(f4), 16});
        break;
      case OutputLevels::kP5Only:
        out.push_back({out5_.forward(t5), 32});
        break;
      case OutputLevels::kP3P4:
        out.push_back({out3_.forward(f3), 8});
        out.push_back({out4_.forward(f4), 16});
        break;
      case OutputLevels::kP3P4P5:
        out.push_back({out3_.forward(f3), 8});
        out.push_back({out4_.forward(f4), 16});
        out.push_back({out5_.forward(t5), 32});
        break;
    }
    return out;
  }

  void register_params(ParamSet<T> &ps) {
    register_lateral(lat5_, "afa.lat5", ps);
    if (lat4_set()) register_lateral(lat4_, "afa.lat4", ps);
    if (lat3_set()) register_lateral(lat3_, "afa.lat3", ps);
    if (merge4_.weight) merge4_.register_params("afa.merge4", ps);
    if (out3_.plain.weight || out3_.dcn.weight) out3_.register_params("afa.out3", ps);
    if (out4_.plain.weight || out4_.dcn.weight) out4_.register_params("afa.out4", ps);
    if (out5_.plain.weight || out5_.dcn.weight) out5_.register_params("afa.out5", ps);
  }

  const AfaConfig &config() const { return cfg_; }

  // Exposed for the degeneracy tests (plain-vs-deform weight sharing).
  struct Lateral {
    bool deform = false;
    Conv2dLayer<T> plain;   // 1x1
    DeformConv2dLayer<T> dcn;  // 3x3
  };
  Lateral lat3_, lat4_, lat5_;
  Conv2dLayer<T> merge4_;
  Conv3x3OrDeform<T> out3_, out4_, out5_;

 private:
  static Lateral make_lateral(int cin, int d, bool deform, Rng &rng) {
    Lateral l;
    l.deform = deform;
    if (deform)
      l.dcn = DeformConv2dLayer<T>(cin, d, rng);
    else
      l.plain = Conv2dLayer<T>(cin, d, 1, 1, 0, rng);
    return l;
  }

  static Var<T> forward_lateral(const Lateral &l, const Var<T> &x) {
    return l.deform ? l.dcn.forward(x) : l.plain.forward(x);
  }

  static void register_lateral(Lateral &l, const std::string &p, ParamSet<T> &ps) {
    if (l.deform)
      l.dcn.register_params(p, ps);
    else
      l.plain.register_params(p, ps);
  }

  bool lat4_set() const { return lat4_.plain.weight || lat4_.dcn.weight; }
  bool lat3_set() const { return lat3_.plain.weight || lat3_.dcn.weight; }

  static void check_ratio(const Var<T> &fine, const Var<T> &coarse, const char *what) {
    if (!fine || !coarse) return;
    const int fh = fine->value.dim(2), fw = fine->value.dim(3);
    const int ch = coarse->value.dim(2), cw = coarse->value.dim(3);
    const bool ok_h = fh == 2 * ch || fh == 2 * ch - 1;
    const bool ok_w = fw == 2 * cw || fw == 2 * cw - 1;
    APS_CHECK(ok_h && ok_w, std::string("Afa: ") + what + " spatial ratio is not 2x: " +
                                shape_str(fine->value.shape()) + " vs " +
                                shape_str(coarse->value.shape()));
  }

  AfaConfig cfg_;
  bool need_p3_ = true, need_p4_ = false;
};

}  // namespace alignps
