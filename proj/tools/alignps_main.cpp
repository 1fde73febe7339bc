// Command-line front end: synthetic data generation, training (single runs
// and ablation presets), protocol evaluation, and ad-hoc retrieval. Exit
// codes: 0 success, 1 usage/config problems, 2 runtime failures.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "alignps/config.hpp"
#include "alignps/infer.hpp"
#include "alignps/trainer.hpp"

namespace fs = std::filesystem;
using namespace alignps;

namespace {

/// Operator mistakes that parsing can't catch (missing required config
/// fields, bad flag payloads); reported like usage errors, exit code 1.
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string &msg) : std::runtime_error(msg) {}
};

std::ofstream open_out(const fs::path &path) {
  std::ofstream os(path);
  if (!os.good()) throw std::runtime_error("cannot write " + path.string());
  return os;
}

struct GenArgs {
  std::string spec_file, out_dir;
  std::uint64_t seed = 1;
  std::optional<int> num_identities, train_images, test_images;
};

void cmd_gen_data(const GenArgs &a) {
  GenSpec g;
  if (!a.spec_file.empty()) g = load_gen_spec(a.spec_file);
  if (a.num_identities) g.scene.identity_count = *a.num_identities;
  if (a.train_images) g.train_images = *a.train_images;
  if (a.test_images) g.test_images = *a.test_images;
  if (g.scene.identity_count < 2) throw UsageError("--num-identities must be at least 2");

  const SyntheticDataset train = generate_synthetic(g.scene, g.train_images, false, a.seed);
  const SyntheticDataset test = generate_synthetic(g.scene, g.test_images, true, a.seed);
  const std::string train_manifest = save_dataset(train, (fs::path(a.out_dir) / "train").string());
  const std::string test_manifest = save_dataset(test, (fs::path(a.out_dir) / "test").string());
  std::printf("train: %zu images -> %s\n", train.manifest.images.size(), train_manifest.c_str());
  std::printf("test: %zu images, %zu queries -> %s\n", test.manifest.images.size(),
              test.manifest.queries.size(), test_manifest.c_str());
}

struct TrainArgs {
  std::string config_file, out_dir, preset, resume, train_dir, test_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> max_steps, batch_size;
  std::optional<float> base_lr;
};

AppConfig effective_config(const std::string &config_file) {
  return config_file.empty() ? AppConfig{} : load_app_config(config_file);
}

void cmd_train(const TrainArgs &a) {
  AppConfig cfg = effective_config(a.config_file);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.max_steps) cfg.train.max_steps = *a.max_steps;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  if (a.base_lr) cfg.train.base_lr = *a.base_lr;
  if (!a.train_dir.empty()) cfg.data.train_dir = a.train_dir;
  if (!a.test_dir.empty()) cfg.data.test_dir = a.test_dir;
  if (cfg.data.train_dir.empty())
    throw UsageError("missing config field: data.train_dir (or pass --train-dir)");

  fs::create_directories(a.out_dir);
  const DatasetManifest train_m =
      load_manifest((fs::path(cfg.data.train_dir) / "manifest.json").string());

  if (!a.preset.empty()) {
    if (cfg.data.test_dir.empty())
      throw UsageError("missing config field: data.test_dir (or pass --test-dir)");
    const DatasetManifest test_m =
        load_manifest((fs::path(cfg.data.test_dir) / "manifest.json").string());
    std::ofstream metrics = open_out(fs::path(a.out_dir) / "metrics.jsonl");
    const auto rows = run_ablation(a.preset, cfg.model, cfg.train, train_m, cfg.data.train_dir,
                                   test_m, cfg.data.test_dir, &metrics);
    const std::string csv = ablation_csv(rows);
    open_out(fs::path(a.out_dir) / ("ablation_" + a.preset + ".csv")) << csv;
    std::fputs(csv.c_str(), stdout);
    return;
  }

  TrainState st = make_train_state(cfg.model, cfg.train, train_m.labeled_identity_count);
  if (!a.resume.empty()) load_checkpoint(st, a.resume);
  const std::vector<SceneImage> scenes = load_all_scenes(train_m, cfg.data.train_dir);
  std::ofstream metrics = open_out(fs::path(a.out_dir) / "metrics.jsonl");
  const auto log = train_loop(st, scenes, &metrics);

  const std::string ckpt = (fs::path(a.out_dir) / "checkpoint.bin").string();
  save_checkpoint(st, ckpt);
  open_out(fs::path(a.out_dir) / "config.json") << serialize_app_config(cfg);
  if (!log.empty())
    std::printf("trained %d steps, final loss %.4f\n", st.step, log.back().total);
  std::printf("checkpoint: %s\n", ckpt.c_str());
}

struct EvalArgs {
  std::string checkpoint, manifest, config_file, out_dir;
  std::vector<int> gallery_sizes;
};

/// Rebuild the training-time state shell so the checkpoint's config digest
/// can vouch that the weights match the requested configuration.
TrainState restore_state(const AppConfig &cfg, const std::string &checkpoint, int labeled_hint) {
  TrainState st = make_train_state(cfg.model, cfg.train, std::max(1, labeled_hint));
  load_checkpoint(st, checkpoint);
  return st;
}

void cmd_eval(const EvalArgs &a) {
  const AppConfig cfg = effective_config(a.config_file);
  const DatasetManifest m = load_manifest(a.manifest);
  const std::string image_dir = fs::path(a.manifest).parent_path().string();
  const TrainState st = restore_state(cfg, a.checkpoint, m.labeled_identity_count);

  const PredictionSet preds = predict_dataset(st.model, m, image_dir, cfg.train.transforms);
  fs::create_directories(a.out_dir);
  save_predictions(preds, (fs::path(a.out_dir) / "predictions.json").string());

  const DetectionMetrics dm = detection_metrics(preds, m);
  std::vector<GalleryMatch> matches;
  for (size_t qi = 0; qi < m.queries.size(); ++qi)
    matches.push_back(search(preds, m, static_cast<int>(qi)));
  const SearchMetrics full = person_search_map(matches);

  const std::vector<int> sizes =
      a.gallery_sizes.empty() ? std::vector<int>{cfg.eval.gallery_size} : a.gallery_sizes;
  const std::vector<SweepRow> sweep = gallery_sweep(preds, m, sizes, cfg.train.seed);
  open_out(fs::path(a.out_dir) / "gallery_sweep.csv") << sweep_csv(sweep);

  std::ofstream mj = open_out(fs::path(a.out_dir) / "metrics.json");
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "{\"recall\": %.6f, \"ap\": %.6f, \"map\": %.6f, \"top1\": %.6f,\n"
                " \"map_at_default_gallery\": %.6f, \"top1_at_default_gallery\": %.6f}\n",
                dm.recall, dm.ap, full.map, full.top1, sweep.front().map, sweep.front().top1);
  mj << buf;

  std::printf("detection: recall %.4f ap %.4f\n", dm.recall, dm.ap);
  std::printf("search (full gallery): mAP %.4f top-1 %.4f\n", full.map, full.top1);
  for (const SweepRow &r : sweep)
    std::printf("search (gallery %d): mAP %.4f top-1 %.4f\n", r.gallery_size, r.map, r.top1);
}

struct SearchArgs {
  std::string checkpoint, config_file, query, query_box, gallery_dir;
  int topk = 5;
};

BoundingBox parse_box(const std::string &s) {
  BoundingBox b;
  char trailing;
  if (std::sscanf(s.c_str(), "%f,%f,%f,%f%c", &b.x1, &b.y1, &b.x2, &b.y2, &trailing) != 4 ||
      b.x1 >= b.x2 || b.y1 >= b.y2)
    throw UsageError("--query-box expects X1,Y1,X2,Y2 with X1<X2 and Y1<Y2, got \"" + s + "\"");
  return b;
}

void cmd_search(const SearchArgs &a) {
  const BoundingBox qbox = parse_box(a.query_box);
  const AppConfig cfg = effective_config(a.config_file);

  // Assemble an in-memory manifest over the gallery directory; the query
  // image joins under its absolute path when it lives elsewhere.
  DatasetManifest m;
  std::vector<std::string> files;
  for (const auto &e : fs::directory_iterator(a.gallery_dir))
    if (e.path().extension() == ".ppm") files.push_back(e.path().filename().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .ppm images under " + a.gallery_dir);

  std::string query_name;
  for (const std::string &f : files)
    if (fs::exists(fs::path(a.gallery_dir) / f) && fs::exists(a.query) &&
        fs::equivalent(fs::path(a.gallery_dir) / f, a.query))
      query_name = f;
  for (const std::string &f : files) m.images.push_back({f, {}});
  const bool query_external = query_name.empty();
  if (query_external) {
    query_name = fs::absolute(a.query).string();
    m.images.push_back({query_name, {}});
  }

  {
    const Tensor qpix = read_ppm(a.query);
    if (qbox.x2 > static_cast<float>(qpix.dim(1)) || qbox.y2 > static_cast<float>(qpix.dim(0)) ||
        qbox.x1 < 0 || qbox.y1 < 0)
      throw std::runtime_error("query box lies outside the query image");
  }
  m.queries.push_back({query_name, qbox, 0, files});

  const TrainState st = restore_state(cfg, a.checkpoint, 1);
  const PredictionSet preds = predict_dataset(st.model, m, a.gallery_dir, cfg.train.transforms);

  struct Hit {
    std::string image;
    PredictedBox det;
    double sim;
  };
  std::vector<Hit> hits;
  for (const ImagePredictions &ip : preds.images) {
    if (query_external && ip.image == query_name)
      continue;  // an out-of-gallery query image only anchors the query
    for (const PredictedBox &d : ip.detections)
      hits.push_back({ip.image, d, cosine_similarity(preds.queries[0].embedding, d.embedding)});
  }
  std::stable_sort(hits.begin(), hits.end(), [](const Hit &x, const Hit &y) { return x.sim > y.sim; });

  const int k = std::min<int>(a.topk, static_cast<int>(hits.size()));
  for (int i = 0; i < k; ++i)
    std::printf("%d %s %.1f,%.1f,%.1f,%.1f %.6f\n", i + 1, hits[static_cast<size_t>(i)].image.c_str(),
                hits[static_cast<size_t>(i)].det.box.x1, hits[static_cast<size_t>(i)].det.box.y1,
                hits[static_cast<size_t>(i)].det.box.x2, hits[static_cast<size_t>(i)].det.box.y2,
                hits[static_cast<size_t>(i)].sim);
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"anchor-free person search: generate data, train, evaluate, retrieve"};
  app.require_subcommand(1);

  GenArgs ga;
  CLI::App *gen = app.add_subcommand("gen-data", "write a synthetic train/test dataset");
  gen->add_option("--spec", ga.spec_file, "generator spec JSON");
  gen->add_option("--out", ga.out_dir, "output directory")->required();
  gen->add_option("--seed", ga.seed, "generator seed");
  gen->add_option("--num-identities", ga.num_identities, "labeled identity count override");
  gen->add_option("--train-images", ga.train_images, "train split size override");
  gen->add_option("--test-images", ga.test_images, "test split size override");
  gen->callback([&] { cmd_gen_data(ga); });

  TrainArgs ta;
  CLI::App *train = app.add_subcommand("train", "train a model or an ablation preset");
  train->add_option("--config", ta.config_file, "config JSON (missing keys use defaults)");
  train->add_option("--out", ta.out_dir, "output directory")->required();
  train->add_option("--preset", ta.preset, "ablation preset: scale|region|task|loss|dcn");
  train->add_option("--resume", ta.resume, "checkpoint to continue from");
  train->add_option("--train-dir", ta.train_dir, "overrides data.train_dir");
  train->add_option("--test-dir", ta.test_dir, "overrides data.test_dir (presets only)");
  train->add_option("--seed", ta.seed, "overrides train.seed");
  train->add_option("--max-steps", ta.max_steps, "overrides train.max_steps");
  train->add_option("--batch-size", ta.batch_size, "overrides train.batch_size");
  train->add_option("--base-lr", ta.base_lr, "overrides train.base_lr");
  train->callback([&] { cmd_train(ta); });

  EvalArgs ea;
  CLI::App *ev = app.add_subcommand("eval", "run the evaluation protocol on a checkpoint");
  ev->add_option("--checkpoint", ea.checkpoint, "trained checkpoint")->required();
  ev->add_option("--manifest", ea.manifest, "test manifest JSON")->required();
  ev->add_option("--config", ea.config_file, "config JSON used at training time");
  ev->add_option("--out", ea.out_dir, "output directory")->required();
  ev->add_option("--gallery-sizes", ea.gallery_sizes, "gallery sweep sizes")->delimiter(',');
  ev->callback([&] { cmd_eval(ea); });

  SearchArgs sa;
  CLI::App *se = app.add_subcommand("search", "rank gallery detections against one query box");
  se->add_option("--checkpoint", sa.checkpoint, "trained checkpoint")->required();
  se->add_option("--config", sa.config_file, "config JSON used at training time");
  se->add_option("--query", sa.query, "query image (PPM)")->required();
  se->add_option("--query-box", sa.query_box, "X1,Y1,X2,Y2 in query-image pixels")->required();
  se->add_option("--gallery", sa.gallery_dir, "directory of gallery PPMs")->required();
  se->add_option("--topk", sa.topk, "matches to print");
  se->callback([&] { cmd_search(sa); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const UsageError &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
