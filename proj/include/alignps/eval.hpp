#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "alignps/core.hpp"
#include "alignps/data.hpp"

namespace alignps {

/// Serialized model output for a whole dataset: per-image detections plus one
/// embedding per manifest query. The evaluator consumes only this file plus
/// the manifest, so any implementation that writes the same format can be
/// scored identically.
struct PredictedBox {
  BoundingBox box;
  float score = 0;
  std::vector<float> embedding;  // L2-normalized, D floats
};

struct ImagePredictions {
  std::string image;  // manifest file name
  std::vector<PredictedBox> detections;
};

struct QueryPrediction {
  std::string image;  // echoes the manifest query for self-description
  int identity = 0;
  std::vector<float> embedding;
};

struct PredictionSet {
  std::vector<ImagePredictions> images;
  std::vector<QueryPrediction> queries;  // same order as manifest queries
};

std::string serialize_predictions(const PredictionSet &p);
PredictionSet parse_predictions(const std::string &json_text);
void save_predictions(const PredictionSet &p, const std::string &path);
PredictionSet load_predictions(const std::string &path);

float cosine_similarity(const std::vector<float> &a, const std::vector<float> &b);

/// One gallery detection in a query's ranking.
struct RankedEntry {
  int image_index = 0;  // into the manifest image list
  int detection = 0;    // into that image's detections
  float similarity = 0;
  bool correct = false;
};

/// Full ranking of one query over its gallery, similarity descending. A
/// detection is correct iff it claims (greedily, in rank order, one detection
/// per box) a ground-truth box of the query identity with IoU >= 0.5.
struct GalleryMatch {
  int query_index = 0;
  int total_gt = 0;  // ground-truth boxes of the query identity in the gallery
  std::vector<RankedEntry> ranking;
};

/// Rank all detections from the query's gallery images by cosine similarity
/// to the query embedding. `gallery_override`, when given, replaces the
/// manifest query's own gallery list (used by the sweep).
GalleryMatch search(const PredictionSet &preds, const DatasetManifest &m, int query_index,
                    const std::vector<std::string> *gallery_override = nullptr);

/// Retrieval AP: sum over correct hits of (hits-so-far / rank), divided by
/// total_gt. Zero when total_gt is 0.
double average_precision(const GalleryMatch &match);

struct SearchMetrics {
  double map = 0, top1 = 0;
  int evaluated = 0, skipped = 0;  // skipped = queries with no gallery ground truth
};

/// Mean AP and top-1 over queries; queries with zero gallery ground truth are
/// excluded with a warning on stderr.
SearchMetrics person_search_map(const std::vector<GalleryMatch> &matches);

struct DetectionMetrics {
  double recall = 0, ap = 0;
};

/// Identity-agnostic detection quality over every image in the manifest:
/// detections pooled across images, matched greedily in descending score
/// order (one per ground-truth box, IoU >= `iou_thresh`), AP as the area
/// under the all-point precision-recall curve with the usual monotone
/// precision envelope.
DetectionMetrics detection_metrics(const PredictionSet &preds, const DatasetManifest &m,
                                   float iou_thresh = 0.5f);

struct SweepRow {
  int gallery_size = 0;
  double map = 0, top1 = 0;
};

/// Re-evaluate retrieval at several gallery sizes. Each query's gallery is
/// sampled deterministically from its manifest gallery: images containing
/// ground truth of the query identity are always kept, the rest fill up to
/// `size` at random. Sizes beyond the available pool are capped with a
/// warning.
std::vector<SweepRow> gallery_sweep(const PredictionSet &preds, const DatasetManifest &m,
                                    const std::vector<int> &sizes, std::uint64_t seed);

/// CSV with header "gallery_size,map,top1".
std::string sweep_csv(const std::vector<SweepRow> &rows);

}  // namespace alignps
