#pragma once

#include <string>
#include <vector>

#include "alignps/core.hpp"
#include "alignps/random.hpp"

namespace alignps {

/// Dataset description: images with annotated persons plus, for test splits,
/// retrieval queries with per-query gallery lists. Serialized as a single
/// JSON document; image paths are relative to the manifest file.
struct ManifestPerson {
  BoundingBox bbox;
  int identity = kUnlabeledId;  // kUnlabeledId serializes as null
};

struct ManifestImage {
  std::string file;
  std::vector<ManifestPerson> persons;
};

struct ManifestQuery {
  std::string image;
  BoundingBox bbox;
  int identity = 0;
  std::vector<std::string> gallery;
};

struct DatasetManifest {
  std::string split;  // "train" or "test"
  int labeled_identity_count = 0;
  std::vector<ManifestImage> images;
  std::vector<ManifestQuery> queries;
};

std::string serialize_manifest(const DatasetManifest &m);
DatasetManifest parse_manifest(const std::string &json_text);
void save_manifest(const DatasetManifest &m, const std::string &path);
DatasetManifest load_manifest(const std::string &path);

/// Binary 8-bit RGB PPM (P6).
void write_ppm(const Tensor &pixels_hw3, const std::string &path);
Tensor read_ppm(const std::string &path);

/// Knobs for the synthetic scene generator. Each person is a textured
/// rectangle whose stripe colors/period encode its identity, placed on a
/// noisy background at a random position and scale.
struct SyntheticSpec {
  int width = 320, height = 200;
  int min_persons = 1, max_persons = 4;
  int identity_count = 8;
  int person_w = 26, person_h = 64;  // base extent before scaling
  float scale_min = 0.7f, scale_max = 1.3f;
  float occlusion_prob = 0.f;    // chance a new person may overlap others
  float unlabeled_prob = 0.1f;   // chance of an unlabeled distractor person
};

/// Per-identity appearance signature: two stripe colors plus a stripe
/// period. Derived deterministically from the identity index so distinct
/// identities always look distinct.
struct AppearanceSig {
  float c1[3], c2[3];
  int period;
};
AppearanceSig identity_appearance(int identity);

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<SceneImage> images;  // pixels in memory; image_id == manifest file name
};

/// Deterministic synthetic scenes. Train split: labeled persons (identity
/// drawn from [0, L)) and occasional unlabeled distractors. Test split:
/// reuses train identities in new scenes and adds one query per labeled
/// identity that appears at least twice, with every other test image as its
/// gallery. occlusion_prob 0 enforces IoU 0 between placed persons.
SyntheticDataset generate_synthetic(const SyntheticSpec &spec, int n_images, bool test_split,
                                    std::uint64_t seed);

/// Write a dataset's images as PPM files under `dir` and the manifest as
/// `dir/manifest.json`, returning the manifest path.
std::string save_dataset(const SyntheticDataset &ds, const std::string &dir);

/// Load an image plus annotations from a manifest entry.
SceneImage load_scene(const DatasetManifest &m, const std::string &manifest_dir, int image_idx);

/// Augmentation/normalization geometry. The paper-scale profile trains with
/// long side uniform in [667, 2000] and tests at 1500x900; the desk profile
/// shrinks both. Flip is the only train-time augmentation.
struct TransformConfig {
  int train_min_long = 667, train_max_long = 2000;
  int test_w = 1500, test_h = 900;
  float flip_prob = 0.5f;
};

inline TransformConfig desk_transforms() {
  TransformConfig t;
  t.train_min_long = 160;
  t.train_max_long = 480;
  t.test_w = 320;
  t.test_h = 192;
  return t;
}

SceneImage train_transform(const SceneImage &img, const TransformConfig &cfg, Rng &rng);
SceneImage test_transform(const SceneImage &img, const TransformConfig &cfg);

}  // namespace alignps
