#pragma once

#include <vector>

#include "alignps/afa.hpp"
#include "alignps/backbone.hpp"
#include "alignps/head.hpp"

namespace alignps {

/// Where the re-id embedding field is tapped from.
///   kRegTower  — output of the regression tower (shared with box/centerness)
///   kClsTower  — output of the classification tower
///   kOwnTower  — a dedicated 4-conv tower on the aggregated map
///   kDirect    — the aggregated map itself (the production wiring)
enum class TaskStructure { kRegTower, kClsTower, kOwnTower, kDirect };

struct ModelConfig {
  BackboneConfig backbone;
  AfaConfig afa;
  HeadConfig head;
  TaskStructure task = TaskStructure::kDirect;
};

/// Backbone -> aligned aggregation -> detection head, plus the per-level
/// embedding field chosen by the task structure. Head channel width and the
/// per-level scale count are derived from the aggregation config so the
/// pieces can't disagree.
template <typename T>
class PersonSearchModel {
 public:
  PersonSearchModel() = default;
  PersonSearchModel(const ModelConfig &cfg, Rng &rng) : cfg_(cfg) {
    cfg_.head.channels = cfg_.afa.out_channels;
    cfg_.head.num_levels = level_count(cfg_.afa.levels);
    backbone_ = Backbone<T>(cfg_.backbone, rng);
    afa_ = Afa<T>(cfg_.afa, cfg_.backbone, rng);
    head_ = FcosHead<T>(cfg_.head, rng);
    if (cfg_.task == TaskStructure::kOwnTower) {
      const int d = cfg_.afa.out_channels;
      for (int i = 0; i < cfg_.head.tower_depth; ++i)
        reid_tower_.emplace_back(d, d, 3, 1, 1, rng);
    }
  }

  struct Out {
    std::vector<PyramidLevel<T>> levels;
    std::vector<HeadOut<T>> heads;
    std::vector<Var<T>> embed;  // NxDxHxW per level, un-normalized
  };

  Out forward(const Var<T> &x) const {
    Out out;
    out.levels = afa_.aggregate(backbone_.forward(x));
    for (size_t li = 0; li < out.levels.size(); ++li) {
      const Var<T> &p = out.levels[li].map;
      out.heads.push_back(head_.forward(p, static_cast<int>(li)));
      switch (cfg_.task) {
        case TaskStructure::kRegTower:
          out.embed.push_back(out.heads.back().reg_tower);
          break;
        case TaskStructure::kClsTower:
          out.embed.push_back(out.heads.back().cls_tower);
          break;
        case TaskStructure::kOwnTower: {
          Var<T> e = p;
          for (const auto &blk : reid_tower_) e = blk.forward(e);
          out.embed.push_back(e);
          break;
        }
        case TaskStructure::kDirect:
          out.embed.push_back(p);
          break;
      }
    }
    return out;
  }

  void register_params(ParamSet<T> &ps) {
    backbone_.register_params(ps);
    afa_.register_params(ps);
    head_.register_params(ps);
    for (size_t i = 0; i < reid_tower_.size(); ++i)
      reid_tower_[i].register_params("reid_tower." + std::to_string(i), ps);
  }

  ParamSet<T> params() {
    ParamSet<T> ps;
    register_params(ps);
    return ps;
  }

  const ModelConfig &config() const { return cfg_; }
  const FcosHead<T> &head() const { return head_; }
  Afa<T> &afa() { return afa_; }
  Backbone<T> &backbone() { return backbone_; }

 private:
  ModelConfig cfg_;
  Backbone<T> backbone_;
  Afa<T> afa_;
  FcosHead<T> head_;
  std::vector<ConvBlock<T>> reid_tower_;
};

using Model = PersonSearchModel<float>;

}  // namespace alignps
