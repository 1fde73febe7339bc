#include "alignps/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>

#include "alignps/random.hpp"
#include "json.hpp"

namespace alignps {

using nlohmann::json;

std::string serialize_predictions(const PredictionSet &p) {
  json j;
  j["images"] = json::array();
  for (const ImagePredictions &img : p.images) {
    json ji;
    ji["file"] = img.image;
    ji["detections"] = json::array();
    for (const PredictedBox &d : img.detections) {
      json jd;
      jd["bbox"] = json::array({d.box.x1, d.box.y1, d.box.x2, d.box.y2});
      jd["score"] = d.score;
      jd["embedding"] = d.embedding;
      ji["detections"].push_back(std::move(jd));
    }
    j["images"].push_back(std::move(ji));
  }
  j["queries"] = json::array();
  for (const QueryPrediction &q : p.queries) {
    json jq;
    jq["image"] = q.image;
    jq["identity"] = q.identity;
    jq["embedding"] = q.embedding;
    j["queries"].push_back(std::move(jq));
  }
  return j.dump();
}

PredictionSet parse_predictions(const std::string &json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error &e) {
    throw std::runtime_error(std::string("predictions: invalid JSON: ") + e.what());
  }
  PredictionSet p;
  for (const json &ji : j.value("images", json::array())) {
    ImagePredictions img;
    img.image = ji.at("file").get<std::string>();
    for (const json &jd : ji.value("detections", json::array())) {
      PredictedBox d;
      const json &b = jd.at("bbox");
      APS_CHECK(b.is_array() && b.size() == 4, "predictions: bbox must be [x1,y1,x2,y2]");
      d.box = {b[0].get<float>(), b[1].get<float>(), b[2].get<float>(), b[3].get<float>()};
      d.score = jd.at("score").get<float>();
      for (const json &v : jd.at("embedding")) d.embedding.push_back(v.get<float>());
      img.detections.push_back(std::move(d));
    }
    p.images.push_back(std::move(img));
  }
  for (const json &jq : j.value("queries", json::array())) {
    QueryPrediction q;
    q.image = jq.at("image").get<std::string>();
    q.identity = jq.at("identity").get<int>();
    for (const json &v : jq.at("embedding")) q.embedding.push_back(v.get<float>());
    p.queries.push_back(std::move(q));
  }
  return p;
}

void save_predictions(const PredictionSet &p, const std::string &path) {
  std::ofstream out(path, std::ios::binary);
  APS_CHECK(out.good(), "cannot write predictions: " + path);
  out << serialize_predictions(p) << "\n";
}

PredictionSet load_predictions(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  APS_CHECK(in.good(), "cannot read predictions: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_predictions(text);
}

float cosine_similarity(const std::vector<float> &a, const std::vector<float> &b) {
  APS_CHECK(a.size() == b.size() && !a.empty(), "cosine: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0 ? static_cast<float>(dot / denom) : 0.f;
}

GalleryMatch search(const PredictionSet &preds, const DatasetManifest &m, int query_index,
                    const std::vector<std::string> *gallery_override) {
  APS_CHECK(query_index >= 0 && query_index < static_cast<int>(m.queries.size()),
            "search: query index out of range");
  APS_CHECK(m.queries.size() == preds.queries.size(),
            "search: prediction set has a different query count than the manifest");
  const ManifestQuery &q = m.queries[static_cast<size_t>(query_index)];
  const std::vector<float> &qemb = preds.queries[static_cast<size_t>(query_index)].embedding;
  const std::vector<std::string> &gallery = gallery_override ? *gallery_override : q.gallery;

  std::map<std::string, int> image_index;
  for (size_t i = 0; i < m.images.size(); ++i) image_index[m.images[i].file] = static_cast<int>(i);
  std::map<std::string, int> pred_index;
  for (size_t i = 0; i < preds.images.size(); ++i)
    pred_index[preds.images[i].image] = static_cast<int>(i);

  GalleryMatch match;
  match.query_index = query_index;
  for (const std::string &file : gallery) {
    const auto mi = image_index.find(file);
    APS_CHECK(mi != image_index.end(), "search: gallery image not in manifest: " + file);
    for (const ManifestPerson &p : m.images[static_cast<size_t>(mi->second)].persons)
      if (p.identity == q.identity) ++match.total_gt;
    const auto pi = pred_index.find(file);
    if (pi == pred_index.end()) continue;  // image without predictions contributes nothing
    const ImagePredictions &ip = preds.images[static_cast<size_t>(pi->second)];
    for (size_t d = 0; d < ip.detections.size(); ++d) {
      RankedEntry e;
      e.image_index = mi->second;
      e.detection = static_cast<int>(d);
      e.similarity = cosine_similarity(qemb, ip.detections[d].embedding);
      match.ranking.push_back(e);
    }
  }
  std::stable_sort(match.ranking.begin(), match.ranking.end(),
                   [](const RankedEntry &a, const RankedEntry &b) { return a.similarity > b.similarity; });

  // Greedy correctness in rank order: each ground-truth box of the query
  // identity may be claimed by at most one detection.
  std::map<int, std::vector<bool>> claimed;  // image index -> per-person flag
  for (RankedEntry &e : match.ranking) {
    const ManifestImage &img = m.images[static_cast<size_t>(e.image_index)];
    if (claimed.find(e.image_index) == claimed.end())
      claimed[e.image_index] = std::vector<bool>(img.persons.size(), false);
    const BoundingBox &det = preds.images[static_cast<size_t>(pred_index[img.file])]
                                 .detections[static_cast<size_t>(e.detection)]
                                 .box;
    float best_iou = 0.5f;
    int best = -1;
    for (size_t p = 0; p < img.persons.size(); ++p) {
      if (img.persons[p].identity != q.identity || claimed[e.image_index][p]) continue;
      const float v = iou(det, img.persons[p].bbox);
      if (v >= best_iou) {
        best_iou = v;
        best = static_cast<int>(p);
      }
    }
    if (best >= 0) {
      claimed[e.image_index][static_cast<size_t>(best)] = true;
      e.correct = true;
    }
  }
  return match;
}

double average_precision(const GalleryMatch &match) {
  if (match.total_gt == 0) return 0.0;
  double ap = 0;
  int hits = 0;
  for (size_t k = 0; k < match.ranking.size(); ++k)
    if (match.ranking[k].correct) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  return ap / match.total_gt;
}

SearchMetrics person_search_map(const std::vector<GalleryMatch> &matches) {
  SearchMetrics out;
  double map_sum = 0;
  int top1_sum = 0;
  for (const GalleryMatch &match : matches) {
    if (match.total_gt == 0) {
      std::cerr << "warning: query " << match.query_index
                << " has no gallery ground truth; excluded from mAP/top-1\n";
      ++out.skipped;
      continue;
    }
    ++out.evaluated;
    map_sum += average_precision(match);
    top1_sum += !match.ranking.empty() && match.ranking.front().correct ? 1 : 0;
  }
  if (out.evaluated > 0) {
    out.map = map_sum / out.evaluated;
    out.top1 = static_cast<double>(top1_sum) / out.evaluated;
  }
  return out;
}

DetectionMetrics detection_metrics(const PredictionSet &preds, const DatasetManifest &m,
                                   float iou_thresh) {
  std::map<std::string, int> image_index;
  for (size_t i = 0; i < m.images.size(); ++i) image_index[m.images[i].file] = static_cast<int>(i);

  int total_gt = 0;
  for (const ManifestImage &img : m.images) total_gt += static_cast<int>(img.persons.size());

  struct Cand {
    int image = 0, det = 0;
    float score = 0;
  };
  std::vector<Cand> cands;
  for (const ImagePredictions &ip : preds.images) {
    const auto it = image_index.find(ip.image);
    APS_CHECK(it != image_index.end(), "detection_metrics: unknown image: " + ip.image);
    for (size_t d = 0; d < ip.detections.size(); ++d)
      cands.push_back({it->second, static_cast<int>(d), ip.detections[d].score});
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Cand &a, const Cand &b) { return a.score > b.score; });

  std::map<std::string, int> pred_index;
  for (size_t i = 0; i < preds.images.size(); ++i)
    pred_index[preds.images[i].image] = static_cast<int>(i);

  std::map<int, std::vector<bool>> claimed;
  std::vector<char> is_tp(cands.size(), 0);
  for (size_t k = 0; k < cands.size(); ++k) {
    const ManifestImage &img = m.images[static_cast<size_t>(cands[k].image)];
    if (claimed.find(cands[k].image) == claimed.end())
      claimed[cands[k].image] = std::vector<bool>(img.persons.size(), false);
    const BoundingBox &det = preds.images[static_cast<size_t>(pred_index[img.file])]
                                 .detections[static_cast<size_t>(cands[k].det)]
                                 .box;
    float best_iou = iou_thresh;
    int best = -1;
    for (size_t p = 0; p < img.persons.size(); ++p) {
      if (claimed[cands[k].image][p]) continue;
      const float v = iou(det, img.persons[p].bbox);
      if (v >= best_iou) {
        best_iou = v;
        best = static_cast<int>(p);
      }
    }
    if (best >= 0) {
      claimed[cands[k].image][static_cast<size_t>(best)] = true;
      is_tp[k] = 1;
    }
  }

  DetectionMetrics out;
  if (total_gt == 0) {
    out.recall = 1.0;
    out.ap = cands.empty() ? 1.0 : 0.0;
    return out;
  }
  std::vector<double> precision(cands.size()), recall(cands.size());
  int tp = 0;
  for (size_t k = 0; k < cands.size(); ++k) {
    tp += is_tp[k];
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(tp) / static_cast<double>(total_gt);
  }
  out.recall = cands.empty() ? 0.0 : recall.back();
  // Monotone precision envelope, then area under the PR curve summed at every
  // recall increment (which only happens at true positives).
  for (size_t k = cands.size(); k-- > 1;)
    precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0, prev_r = 0;
  for (size_t k = 0; k < cands.size(); ++k)
    if (is_tp[k]) {
      ap += (recall[k] - prev_r) * precision[k];
      prev_r = recall[k];
    }
  out.ap = ap;
  return out;
}

std::vector<SweepRow> gallery_sweep(const PredictionSet &preds, const DatasetManifest &m,
                                    const std::vector<int> &sizes, std::uint64_t seed) {
  std::map<std::string, int> image_index;
  for (size_t i = 0; i < m.images.size(); ++i) image_index[m.images[i].file] = static_cast<int>(i);

  std::vector<SweepRow> rows;
  Rng root(seed);
  for (size_t si = 0; si < sizes.size(); ++si) {
    std::vector<GalleryMatch> matches;
    for (size_t qi = 0; qi < m.queries.size(); ++qi) {
      const ManifestQuery &q = m.queries[qi];
      std::vector<std::string> with_gt, distractor;
      for (const std::string &file : q.gallery) {
        const ManifestImage &img = m.images[static_cast<size_t>(image_index.at(file))];
        const bool has = std::any_of(img.persons.begin(), img.persons.end(),
                                     [&q](const ManifestPerson &p) { return p.identity == q.identity; });
        (has ? with_gt : distractor).push_back(file);
      }
      int size = sizes[si];
      if (size > static_cast<int>(q.gallery.size())) {
        std::cerr << "warning: gallery size " << size << " exceeds pool of " << q.gallery.size()
                  << " for query " << qi << "; capped\n";
        size = static_cast<int>(q.gallery.size());
      }
      // True instances always stay in the gallery; distractors fill the rest.
      std::vector<std::string> gallery = with_gt;
      Rng rng = root.fork(si * 100003 + qi);
      rng.shuffle(distractor);
      for (const std::string &file : distractor) {
        if (static_cast<int>(gallery.size()) >= size) break;
        gallery.push_back(file);
      }
      matches.push_back(search(preds, m, static_cast<int>(qi), &gallery));
    }
    const SearchMetrics sm = person_search_map(matches);
    rows.push_back({sizes[si], sm.map, sm.top1});
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow> &rows) {
  std::string out = "gallery_size,map,top1\n";
  char line[96];
  for (const SweepRow &r : rows) {
    std::snprintf(line, sizeof(line), "%d,%.6f,%.6f\n", r.gallery_size, r.map, r.top1);
    out += line;
  }
  return out;
}

}  // namespace alignps
