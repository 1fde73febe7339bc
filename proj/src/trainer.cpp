#include "alignps/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "alignps/infer.hpp"

namespace alignps {

float lr_at(const TrainConfig &cfg, int step, int steps_per_epoch) {
  APS_CHECK(step >= 0 && steps_per_epoch > 0, "lr_at: bad step arithmetic");
  float lr = cfg.base_lr;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    lr *= static_cast<float>(step + 1) / static_cast<float>(cfg.warmup_steps);
  const int epoch = step / steps_per_epoch;
  for (int e : cfg.lr_decay_epochs)
    if (epoch >= e) lr *= cfg.lr_decay_factor;
  return lr;
}

TrainState make_train_state(const ModelConfig &mcfg, const TrainConfig &tcfg,
                            int labeled_identities) {
  APS_CHECK(tcfg.warmup_steps >= 0, "train config: warmup_steps must be >= 0");
  APS_CHECK(tcfg.batch_size >= 1, "train config: batch_size must be >= 1");
  for (int e : tcfg.lr_decay_epochs)
    APS_CHECK(e < tcfg.total_epochs, "train config: decay epoch beyond total_epochs");
  APS_CHECK(labeled_identities >= 1, "train config: need at least one labeled identity");

  TrainState st;
  st.mcfg = mcfg;
  st.tcfg = tcfg;
  Rng rng(tcfg.seed);
  st.model = Model(mcfg, rng);
  st.mcfg = st.model.config();  // head fields derived from the aggregation config
  st.mem = ReidMemory::random_init(labeled_identities, tcfg.queue_slots,
                                   st.mcfg.afa.out_channels, rng);
  st.params = st.model.params();
  for (const auto &[name, v] : st.params.items)
    st.velocity.push_back(Tensor::zeros(v->value.shape()));
  return st;
}

StepStats train_step(TrainState &st, const std::vector<SceneImage> &batch, int steps_per_epoch) {
  auto [x, metas] = batch_to_tensor<float>(batch);
  const auto out = st.model.forward(make_const<float>(std::move(x)));
  const auto lb = compute_losses<float>(out, metas, st.mem, st.mcfg, st.tcfg.reid,
                                        st.tcfg.w_det, st.tcfg.w_reid);

  StepStats stats;
  stats.step = st.step;
  stats.total = lb.total->value[0];
  stats.det_cls = lb.det.cls->value[0];
  stats.det_reg = lb.det.reg->value[0];
  stats.det_ctr = lb.det.ctr->value[0];
  stats.reid_softmax = lb.reid_softmax->value[0];
  stats.reid_triplet = lb.reid_triplet->value[0];
  if (!std::isfinite(stats.total)) {
    std::ostringstream dump;
    dump << "train_step: non-finite loss at step " << st.step << " (cls=" << stats.det_cls
         << " reg=" << stats.det_reg << " ctr=" << stats.det_ctr
         << " softmax=" << stats.reid_softmax << " triplet=" << stats.reid_triplet << ")";
    throw std::runtime_error(dump.str());
  }

  for (auto &[name, v] : st.params.items) v->grad = Tensor();
  backward<float>(lb.total);

  stats.lr = lr_at(st.tcfg, st.step, steps_per_epoch);
  const float m = st.tcfg.momentum, wd = st.tcfg.weight_decay, lr = stats.lr;
  for (size_t i = 0; i < st.params.items.size(); ++i) {
    Var<float> &p = st.params.items[i].second;
    if (p->grad.numel() == 0) continue;  // not part of this step's graph
    Tensor &vel = st.velocity[i];
    float *vd = vel.data(), *pd = p->value.data();
    const float *gd = p->grad.data();
    for (std::int64_t k = 0; k < vel.numel(); ++k) {
      vd[k] = m * vd[k] + gd[k] + wd * pd[k];
      pd[k] -= lr * vd[k];
    }
  }

  // The memory learns only when the matching objective is active.
  if (st.tcfg.w_reid > 0.f) update_memory(st.mem, lb.labeled_feats, lb.unlabeled_feats);
  ++st.step;
  return stats;
}

std::vector<SceneImage> load_all_scenes(const DatasetManifest &m, const std::string &dir) {
  std::vector<SceneImage> scenes;
  for (size_t i = 0; i < m.images.size(); ++i)
    scenes.push_back(load_scene(m, dir, static_cast<int>(i)));
  return scenes;
}

namespace {

void write_metrics_line(std::ostream &os, const StepStats &s) {
  os << "{\"step\":" << s.step << ",\"lr\":" << s.lr << ",\"total\":" << s.total
     << ",\"det_cls\":" << s.det_cls << ",\"det_reg\":" << s.det_reg
     << ",\"det_ctr\":" << s.det_ctr << ",\"reid_softmax\":" << s.reid_softmax
     << ",\"reid_triplet\":" << s.reid_triplet << "}\n";
}

}  // namespace

std::vector<StepStats> train_loop(TrainState &st, const std::vector<SceneImage> &scenes,
                                  std::ostream *metrics) {
  APS_CHECK(!scenes.empty(), "train_loop: no training images");
  const int n = static_cast<int>(scenes.size());
  const int bs = st.tcfg.batch_size;
  const int steps_per_epoch = (n + bs - 1) / bs;
  int total_steps = st.tcfg.total_epochs * steps_per_epoch;
  if (st.tcfg.max_steps > 0) total_steps = std::min(total_steps, st.tcfg.max_steps);

  std::vector<StepStats> log;
  for (; st.step < total_steps;) {
    const int epoch = st.step / steps_per_epoch;
    const int slot = st.step % steps_per_epoch;

    // Both streams are re-derived from the counter, never carried, so a
    // resumed run continues bit-exactly.
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = Rng(st.tcfg.seed ^ 0x5u).fork(static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);
    Rng aug_rng = Rng(st.tcfg.seed ^ 0xAu).fork(static_cast<std::uint64_t>(st.step));

    std::vector<SceneImage> batch;
    for (int b = slot * bs; b < std::min((slot + 1) * bs, n); ++b)
      batch.push_back(train_transform(scenes[static_cast<size_t>(order[static_cast<size_t>(b)])],
                                      st.tcfg.transforms, aug_rng));
    const StepStats stats = train_step(st, batch, steps_per_epoch);
    if (metrics) write_metrics_line(*metrics, stats);
    log.push_back(stats);
  }
  return log;
}

namespace {

// FNV-1a over a canonical rendering of every semantically relevant field.
struct Digest {
  std::uint64_t h = 1469598103934665603ULL;
  void feed(const void *p, size_t n) {
    const unsigned char *b = static_cast<const unsigned char *>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  }
  void add(int v) { feed(&v, sizeof v); }
  void add(float v) { feed(&v, sizeof v); }
  void add(bool v) { add(static_cast<int>(v)); }
  void add(std::uint64_t v) { feed(&v, sizeof v); }
};

}  // namespace

std::uint64_t config_hash(const ModelConfig &mcfg, const TrainConfig &tcfg) {
  Digest d;
  d.add(static_cast<int>(mcfg.backbone.variant));
  d.add(mcfg.backbone.c3);
  d.add(mcfg.backbone.c4);
  d.add(mcfg.backbone.c5);
  d.add(mcfg.backbone.deform_res3);
  d.add(mcfg.backbone.deform_res4);
  d.add(mcfg.backbone.deform_res5);
  d.add(static_cast<int>(mcfg.afa.lateral));
  d.add(static_cast<int>(mcfg.afa.fusion));
  d.add(static_cast<int>(mcfg.afa.output));
  d.add(mcfg.afa.out_channels);
  d.add(static_cast<int>(mcfg.afa.levels));
  d.add(mcfg.afa.range_p3);
  d.add(mcfg.afa.range_p4);
  d.add(mcfg.head.tower_depth);
  d.add(mcfg.head.prior_prob);
  d.add(mcfg.head.radius);
  d.add(mcfg.head.focal_alpha);
  d.add(mcfg.head.focal_gamma);
  d.add(mcfg.head.ctr_weighted_reg);
  d.add(mcfg.head.score_thresh);
  d.add(mcfg.head.nms_thresh);
  d.add(mcfg.head.max_detections);
  d.add(static_cast<int>(mcfg.task));
  d.add(tcfg.base_lr);
  d.add(tcfg.momentum);
  d.add(tcfg.weight_decay);
  for (int e : tcfg.lr_decay_epochs) d.add(e);
  d.add(tcfg.lr_decay_factor);
  d.add(tcfg.total_epochs);
  d.add(tcfg.warmup_steps);
  d.add(tcfg.batch_size);
  d.add(tcfg.w_det);
  d.add(tcfg.w_reid);
  // max_steps stays out: it truncates a run without changing any step of the
  // trajectory, so a capped checkpoint may resume into a longer schedule.
  d.add(tcfg.queue_slots);
  d.add(tcfg.seed);
  d.add(tcfg.reid.focal);
  d.add(tcfg.reid.focal_gamma);
  d.add(tcfg.reid.use_triplet);
  d.add(tcfg.reid.triplet_use_lut);
  d.add(tcfg.reid.margin);
  d.add(tcfg.reid.samples_per_person);
  d.add(tcfg.transforms.train_min_long);
  d.add(tcfg.transforms.train_max_long);
  d.add(tcfg.transforms.test_w);
  d.add(tcfg.transforms.test_h);
  d.add(tcfg.transforms.flip_prob);
  return d.h;
}

namespace {

constexpr char kCkptMagic[8] = {'A', 'P', 'S', 'C', 'K', '0', '0', '1'};

template <typename T>
void put(std::ostream &os, const T &v) {
  os.write(reinterpret_cast<const char *>(&v), sizeof v);
}

template <typename T>
T get(std::istream &is) {
  T v{};
  is.read(reinterpret_cast<char *>(&v), sizeof v);
  APS_CHECK(is.good(), "checkpoint: truncated file");
  return v;
}

void put_tensor(std::ostream &os, const Tensor &t) {
  put<std::int32_t>(os, static_cast<std::int32_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) put<std::int32_t>(os, t.dim(i));
  os.write(reinterpret_cast<const char *>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
}

Tensor get_tensor(std::istream &is) {
  const int nd = get<std::int32_t>(is);
  APS_CHECK(nd >= 0 && nd <= 8, "checkpoint: corrupt tensor rank");
  std::vector<int> shape;
  for (int i = 0; i < nd; ++i) shape.push_back(get<std::int32_t>(is));
  Tensor t(shape);
  is.read(reinterpret_cast<char *>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(float)));
  APS_CHECK(is.good(), "checkpoint: truncated tensor data");
  return t;
}

}  // namespace

void save_checkpoint(const TrainState &st, const std::string &path) {
  std::ofstream os(path, std::ios::binary);
  APS_CHECK(os.good(), "cannot write checkpoint: " + path);
  os.write(kCkptMagic, sizeof kCkptMagic);
  put<std::uint64_t>(os, config_hash(st.mcfg, st.tcfg));
  put<std::int64_t>(os, st.step);
  put<std::int32_t>(os, static_cast<std::int32_t>(st.params.items.size()));
  for (size_t i = 0; i < st.params.items.size(); ++i) {
    const auto &[name, v] = st.params.items[i];
    put<std::int32_t>(os, static_cast<std::int32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_tensor(os, v->value);
    put_tensor(os, st.velocity[i]);
  }
  put_tensor(os, st.mem.lut);
  put_tensor(os, st.mem.queue);
  put<std::int32_t>(os, st.mem.queue_head);
  put<float>(os, st.mem.momentum);
  put<float>(os, st.mem.temperature);
  APS_CHECK(os.good(), "checkpoint write failed: " + path);
}

void load_checkpoint(TrainState &st, const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  APS_CHECK(is.good(), "cannot read checkpoint: " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  APS_CHECK(is.good() && std::memcmp(magic, kCkptMagic, sizeof magic) == 0,
            "checkpoint: bad magic in " + path);
  const std::uint64_t h = get<std::uint64_t>(is);
  APS_CHECK(h == config_hash(st.mcfg, st.tcfg),
            "checkpoint: config digest mismatch (the archive was produced by a different "
            "configuration)");
  st.step = static_cast<int>(get<std::int64_t>(is));
  const int count = get<std::int32_t>(is);
  APS_CHECK(count == static_cast<int>(st.params.items.size()),
            "checkpoint: parameter count mismatch");
  for (int i = 0; i < count; ++i) {
    const int len = get<std::int32_t>(is);
    std::string name(static_cast<size_t>(len), '\0');
    is.read(name.data(), len);
    auto &[want, v] = st.params.items[static_cast<size_t>(i)];
    APS_CHECK(name == want, "checkpoint: parameter order mismatch at " + name);
    Tensor val = get_tensor(is);
    APS_CHECK(val.shape() == v->value.shape(), "checkpoint: shape mismatch at " + name);
    v->value = std::move(val);
    st.velocity[static_cast<size_t>(i)] = get_tensor(is);
  }
  st.mem.lut = get_tensor(is);
  st.mem.queue = get_tensor(is);
  st.mem.queue_head = get<std::int32_t>(is);
  st.mem.momentum = get<float>(is);
  st.mem.temperature = get<float>(is);
}

std::vector<AblationSpec> ablation_preset(const std::string &preset, const ModelConfig &base_m,
                                          const TrainConfig &base_t) {
  std::vector<AblationSpec> specs;
  auto push = [&](const std::string &name, auto &&mutate) {
    AblationSpec s{name, base_m, base_t};
    mutate(s);
    specs.push_back(std::move(s));
  };

  if (preset == "scale") {
    const std::pair<const char *, OutputLevels> rows[] = {
        {"P3", OutputLevels::kP3Only},     {"P4", OutputLevels::kP4Only},
        {"P5", OutputLevels::kP5Only},     {"P3+P4", OutputLevels::kP3P4},
        {"P3+P4+P5", OutputLevels::kP3P4P5}};
    for (const auto &[name, lv] : rows)
      push(name, [lv](AblationSpec &s) { s.mcfg.afa.levels = lv; });
  } else if (preset == "region") {
    for (int lat = 0; lat < 2; ++lat)
      for (int out = 0; out < 2; ++out)
        for (int cat = 0; cat < 2; ++cat) {
          const std::string name = std::string("lat:") + (lat ? "deform" : "plain") +
                                   "|out:" + (out ? "deform" : "plain") +
                                   "|fuse:" + (cat ? "concat" : "sum");
          push(name, [lat, out, cat](AblationSpec &s) {
            s.mcfg.afa.lateral = lat ? LateralKind::kDeform3x3 : LateralKind::kPlain1x1;
            s.mcfg.afa.output = out ? OutputKind::kDeform3x3 : OutputKind::kPlain3x3;
            s.mcfg.afa.fusion = cat ? FusionKind::kConcat : FusionKind::kSum;
          });
        }
  } else if (preset == "task") {
    const std::pair<const char *, TaskStructure> rows[] = {
        {"reg_tower", TaskStructure::kRegTower},
        {"cls_tower", TaskStructure::kClsTower},
        {"own_tower", TaskStructure::kOwnTower},
        {"direct", TaskStructure::kDirect}};
    for (const auto &[name, task] : rows)
      push(name, [task](AblationSpec &s) { s.mcfg.task = task; });
  } else if (preset == "loss") {
    push("oim", [](AblationSpec &s) { s.tcfg.reid.use_triplet = false; });
    push("toim_no_lut", [](AblationSpec &s) {
      s.tcfg.reid.use_triplet = true;
      s.tcfg.reid.triplet_use_lut = false;
    });
    push("toim_lut", [](AblationSpec &s) {
      s.tcfg.reid.use_triplet = true;
      s.tcfg.reid.triplet_use_lut = true;
    });
  } else if (preset == "dcn") {
    const std::array<bool, 3> rows[] = {
        {false, false, false}, {false, false, true}, {false, true, true}, {true, true, true}};
    const char *names[] = {"none", "res5", "res4+res5", "res3+res4+res5"};
    for (int i = 0; i < 4; ++i) {
      const auto flags = rows[i];
      push(names[i], [flags](AblationSpec &s) {
        s.mcfg.backbone.deform_res3 = flags[0];
        s.mcfg.backbone.deform_res4 = flags[1];
        s.mcfg.backbone.deform_res5 = flags[2];
      });
    }
  } else {
    throw std::runtime_error("unknown ablation preset: " + preset);
  }
  return specs;
}

AblationRow run_variant(const AblationSpec &spec, const DatasetManifest &train_m,
                        const std::string &train_dir, const DatasetManifest &test_m,
                        const std::string &test_dir, std::ostream *metrics) {
  TrainState st = make_train_state(spec.mcfg, spec.tcfg, train_m.labeled_identity_count);
  const std::vector<SceneImage> scenes = load_all_scenes(train_m, train_dir);
  train_loop(st, scenes, metrics);

  const PredictionSet preds = predict_dataset(st.model, test_m, test_dir, spec.tcfg.transforms);
  const DetectionMetrics dm = detection_metrics(preds, test_m);
  std::vector<GalleryMatch> matches;
  for (size_t qi = 0; qi < test_m.queries.size(); ++qi)
    matches.push_back(search(preds, test_m, static_cast<int>(qi)));
  const SearchMetrics sm = person_search_map(matches);

  AblationRow row;
  row.variant = spec.variant;
  row.hash = config_hash(st.mcfg, st.tcfg);
  row.recall = dm.recall;
  row.ap = dm.ap;
  row.map = sm.map;
  row.top1 = sm.top1;
  return row;
}

std::vector<AblationRow> run_ablation(const std::string &preset, const ModelConfig &base_m,
                                      const TrainConfig &base_t, const DatasetManifest &train_m,
                                      const std::string &train_dir, const DatasetManifest &test_m,
                                      const std::string &test_dir, std::ostream *metrics) {
  std::vector<AblationRow> rows;
  for (const AblationSpec &spec : ablation_preset(preset, base_m, base_t))
    rows.push_back(run_variant(spec, train_m, train_dir, test_m, test_dir, metrics));
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow> &rows) {
  std::string out = "variant,recall,ap,map,top1\n";
  char line[160];
  for (const AblationRow &r : rows) {
    std::snprintf(line, sizeof(line), "%s,%.6f,%.6f,%.6f,%.6f\n", r.variant.c_str(), r.recall,
                  r.ap, r.map, r.top1);
    out += line;
  }
  return out;
}

}  // namespace alignps
