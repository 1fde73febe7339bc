#include "alignps/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"

namespace alignps {

using nlohmann::json;

namespace {

json box_to_json(const BoundingBox &b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

BoundingBox box_from_json(const json &j) {
  APS_CHECK(j.is_array() && j.size() == 4, "manifest: bbox must be [x1,y1,x2,y2]");
  return {j[0].get<float>(), j[1].get<float>(), j[2].get<float>(), j[3].get<float>()};
}

}  // namespace

std::string serialize_manifest(const DatasetManifest &m) {
  json j;
  j["split"] = m.split;
  j["labeled_identity_count"] = m.labeled_identity_count;
  j["images"] = json::array();
  for (const ManifestImage &img : m.images) {
    json ji;
    ji["file"] = img.file;
    ji["persons"] = json::array();
    for (const ManifestPerson &p : img.persons) {
      json jp;
      jp["bbox"] = box_to_json(p.bbox);
      if (p.identity == kUnlabeledId)
        jp["identity"] = nullptr;
      else
        jp["identity"] = p.identity;
      ji["persons"].push_back(jp);
    }
    j["images"].push_back(ji);
  }
  j["queries"] = json::array();
  for (const ManifestQuery &q : m.queries) {
    json jq;
    jq["image"] = q.image;
    jq["bbox"] = box_to_json(q.bbox);
    jq["identity"] = q.identity;
    jq["gallery"] = q.gallery;
    j["queries"].push_back(jq);
  }
  return j.dump(2);
}

DatasetManifest parse_manifest(const std::string &json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error &e) {
    throw std::runtime_error(std::string("manifest: invalid JSON: ") + e.what());
  }
  DatasetManifest m;
  m.split = j.value("split", "train");
  m.labeled_identity_count = j.value("labeled_identity_count", 0);
  for (const json &ji : j.value("images", json::array())) {
    ManifestImage img;
    img.file = ji.at("file").get<std::string>();
    for (const json &jp : ji.value("persons", json::array())) {
      ManifestPerson p;
      p.bbox = box_from_json(jp.at("bbox"));
      p.identity = jp.at("identity").is_null() ? kUnlabeledId : jp.at("identity").get<int>();
      APS_CHECK(p.identity == kUnlabeledId ||
                    (p.identity >= 0 && p.identity < m.labeled_identity_count),
                "manifest: identity out of range in " + img.file);
      img.persons.push_back(p);
    }
    m.images.push_back(std::move(img));
  }
  for (const json &jq : j.value("queries", json::array())) {
    ManifestQuery q;
    q.image = jq.at("image").get<std::string>();
    q.bbox = box_from_json(jq.at("bbox"));
    q.identity = jq.at("identity").get<int>();
    for (const json &g : jq.value("gallery", json::array())) q.gallery.push_back(g.get<std::string>());
    m.queries.push_back(std::move(q));
  }
  return m;
}

void save_manifest(const DatasetManifest &m, const std::string &path) {
  std::ofstream out(path, std::ios::binary);
  APS_CHECK(out.good(), "cannot write manifest: " + path);
  out << serialize_manifest(m) << "\n";
}

DatasetManifest load_manifest(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  APS_CHECK(in.good(), "cannot read manifest: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_manifest(text);
}

void write_ppm(const Tensor &pixels_hw3, const std::string &path) {
  APS_CHECK(pixels_hw3.ndim() == 3 && pixels_hw3.dim(2) == 3, "write_ppm: expected HxWx3");
  const int h = pixels_hw3.dim(0), w = pixels_hw3.dim(1);
  std::ofstream out(path, std::ios::binary);
  APS_CHECK(out.good(), "cannot write image: " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(pixels_hw3.at3(y, x, c), 0.f, 1.f);
        row[static_cast<size_t>(x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.f));
      }
    out.write(reinterpret_cast<const char *>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

Tensor read_ppm(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  APS_CHECK(in.good(), "cannot read image: " + path);
  std::string magic;
  in >> magic;
  APS_CHECK(magic == "P6", "read_ppm: not a binary PPM: " + path);
  auto next_token = [&in, &path] {
    // Skips whitespace and '#' comment lines, the PPM header grammar.
    std::string tok;
    while (in >> tok) {
      if (tok[0] != '#') return tok;
      std::string rest;
      std::getline(in, rest);
    }
    throw std::runtime_error("read_ppm: truncated header: " + path);
  };
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxv = std::stoi(next_token());
  APS_CHECK(maxv == 255, "read_ppm: only 8-bit images supported: " + path);
  in.get();  // single whitespace after header
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char *>(raw.data()), static_cast<std::streamsize>(raw.size()));
  APS_CHECK(in.gcount() == static_cast<std::streamsize>(raw.size()),
            "read_ppm: truncated pixel data: " + path);
  Tensor t({h, w, 3});
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(raw[static_cast<size_t>(i)]) / 255.f;
  return t;
}

AppearanceSig identity_appearance(int identity) {
  // Golden-ratio hue walk keeps any two identities far apart in hue; the
  // second color and the stripe period add texture separability.
  auto hue_rgb = [](float hue, float v, float *rgb) {
    const float h6 = hue * 6.f;
    const int i = static_cast<int>(h6) % 6;
    const float f = h6 - std::floor(h6);
    const float p = v * 0.15f, q = v * (1.f - 0.85f * f), t = v * (1.f - 0.85f * (1.f - f));
    switch (i) {
      case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
      case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
      case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
      case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
      case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
      default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
    }
  };
  AppearanceSig sig;
  const float golden = 0.6180339887f;
  const float h1 = std::fmod(0.11f + golden * static_cast<float>(identity), 1.f);
  const float h2 = std::fmod(h1 + 0.31f + 0.13f * static_cast<float>(identity % 3), 1.f);
  hue_rgb(h1, 0.95f, sig.c1);
  hue_rgb(h2, 0.55f, sig.c2);
  sig.period = 3 + identity % 5;
  return sig;
}

namespace {

void paint_background(Tensor &px, Rng &rng) {
  const int h = px.dim(0), w = px.dim(1);
  // Low-contrast gray gradient plus pixel noise: textured but far from any
  // identity signature.
  const float gx = static_cast<float>(rng.uniform(-0.08, 0.08));
  const float gy = static_cast<float>(rng.uniform(-0.08, 0.08));
  const float base = static_cast<float>(rng.uniform(0.35, 0.5));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float v = base + gx * static_cast<float>(x) / static_cast<float>(w) +
                      gy * static_cast<float>(y) / static_cast<float>(h);
      for (int c = 0; c < 3; ++c)
        px.at3(y, x, c) =
            std::clamp(v + 0.03f * static_cast<float>(rng.normal()), 0.f, 1.f);
    }
}

void paint_person(Tensor &px, const BoundingBox &b, const AppearanceSig &sig, Rng &rng) {
  const int h = px.dim(0), w = px.dim(1);
  const int x1 = std::max(0, static_cast<int>(std::lround(b.x1)));
  const int y1 = std::max(0, static_cast<int>(std::lround(b.y1)));
  const int x2 = std::min(w, static_cast<int>(std::lround(b.x2)));
  const int y2 = std::min(h, static_cast<int>(std::lround(b.y2)));
  const float jitter = 0.04f;
  for (int y = y1; y < y2; ++y) {
    const bool head = (y - y1) < (y2 - y1) / 5;  // darker cap for asymmetry
    const float *col = ((y - y1) / sig.period) % 2 == 0 ? sig.c1 : sig.c2;
    for (int x = x1; x < x2; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = head ? 0.55f * col[c] : col[c];
        v += jitter * static_cast<float>(rng.normal());
        px.at3(y, x, c) = std::clamp(v, 0.f, 1.f);
      }
  }
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticSpec &spec, int n_images, bool test_split,
                                    std::uint64_t seed) {
  APS_CHECK(spec.identity_count >= 2, "synthetic spec: need at least 2 identities");
  const float min_w = static_cast<float>(spec.person_w) * spec.scale_min;
  const float min_h = static_cast<float>(spec.person_h) * spec.scale_min;
  APS_CHECK(min_w + 2 <= static_cast<float>(spec.width) &&
                min_h + 2 <= static_cast<float>(spec.height),
            "synthetic spec: smallest person does not fit the canvas");

  SyntheticDataset ds;
  ds.manifest.split = test_split ? "test" : "train";
  ds.manifest.labeled_identity_count = spec.identity_count;

  Rng root(seed ^ (test_split ? 0x7e57u : 0));
  for (int n = 0; n < n_images; ++n) {
    Rng rng = root.fork(static_cast<std::uint64_t>(n));
    SceneImage img;
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%04d.ppm", test_split ? "test" : "train", n);
    img.image_id = name;
    img.pixels = Tensor({spec.height, spec.width, 3});
    img.valid_width = spec.width;
    img.valid_height = spec.height;
    paint_background(img.pixels, rng);

    const int persons = static_cast<int>(rng.uniform_int(spec.min_persons, spec.max_persons));
    for (int p = 0; p < persons; ++p) {
      const bool allow_overlap = rng.bernoulli(spec.occlusion_prob);
      BoundingBox box;
      bool placed = false;
      for (int attempt = 0; attempt < 120 && !placed; ++attempt) {
        const float s = static_cast<float>(rng.uniform(spec.scale_min, spec.scale_max));
        const float bw = std::min(static_cast<float>(spec.person_w) * s,
                                  static_cast<float>(spec.width) - 2.f);
        const float bh = std::min(static_cast<float>(spec.person_h) * s,
                                  static_cast<float>(spec.height) - 2.f);
        const float x1 = static_cast<float>(rng.uniform(1, spec.width - 1 - bw));
        const float y1 = static_cast<float>(rng.uniform(1, spec.height - 1 - bh));
        box = {x1, y1, x1 + bw, y1 + bh};
        placed = true;
        if (!allow_overlap)
          for (const PersonAnnotation &other : img.annotations)
            if (iou(box, other.box) > 0.f) placed = false;
      }
      if (!placed) continue;  // crowded image: skip this person

      int identity;
      if (rng.bernoulli(spec.unlabeled_prob)) {
        // Distractors draw an appearance outside the labeled range.
        identity = kUnlabeledId;
        paint_person(img.pixels, box,
                     identity_appearance(spec.identity_count +
                                         static_cast<int>(rng.uniform_int(0, 999))),
                     rng);
      } else {
        identity = static_cast<int>(rng.uniform_int(0, spec.identity_count - 1));
        paint_person(img.pixels, box, identity_appearance(identity), rng);
      }
      img.annotations.push_back({box, identity});
    }

    ManifestImage mi;
    mi.file = img.image_id;
    for (const PersonAnnotation &a : img.annotations) mi.persons.push_back({a.box, a.identity});
    ds.manifest.images.push_back(std::move(mi));
    ds.images.push_back(std::move(img));
  }

  if (test_split) {
    // One query per labeled identity that appears in at least two images:
    // the first instance is the query, every other image is its gallery.
    std::map<int, std::vector<std::pair<int, int>>> sightings;  // id -> (image, person)
    for (size_t i = 0; i < ds.manifest.images.size(); ++i)
      for (size_t p = 0; p < ds.manifest.images[i].persons.size(); ++p) {
        const int id = ds.manifest.images[i].persons[p].identity;
        if (id != kUnlabeledId)
          sightings[id].push_back({static_cast<int>(i), static_cast<int>(p)});
      }
    for (const auto &[id, where] : sightings) {
      std::set<int> distinct;
      for (auto &[im, _] : where) distinct.insert(im);
      if (distinct.size() < 2) continue;
      const auto &[qi, qp] = where.front();
      ManifestQuery q;
      q.image = ds.manifest.images[static_cast<size_t>(qi)].file;
      q.bbox = ds.manifest.images[static_cast<size_t>(qi)].persons[static_cast<size_t>(qp)].bbox;
      q.identity = id;
      for (size_t i = 0; i < ds.manifest.images.size(); ++i)
        if (static_cast<int>(i) != qi) q.gallery.push_back(ds.manifest.images[i].file);
      ds.manifest.queries.push_back(std::move(q));
    }
  }
  return ds;
}

std::string save_dataset(const SyntheticDataset &ds, const std::string &dir) {
  std::filesystem::create_directories(dir);
  for (const SceneImage &img : ds.images)
    write_ppm(img.pixels, (std::filesystem::path(dir) / img.image_id).string());
  const std::string mpath = (std::filesystem::path(dir) / "manifest.json").string();
  save_manifest(ds.manifest, mpath);
  return mpath;
}

SceneImage load_scene(const DatasetManifest &m, const std::string &manifest_dir, int image_idx) {
  APS_CHECK(image_idx >= 0 && image_idx < static_cast<int>(m.images.size()),
            "load_scene: image index out of range");
  const ManifestImage &mi = m.images[static_cast<size_t>(image_idx)];
  SceneImage img;
  img.image_id = mi.file;
  img.pixels = read_ppm((std::filesystem::path(manifest_dir) / mi.file).string());
  img.valid_width = img.width();
  img.valid_height = img.height();
  for (const ManifestPerson &p : mi.persons) img.annotations.push_back({p.bbox, p.identity});
  return img;
}

SceneImage train_transform(const SceneImage &img, const TransformConfig &cfg, Rng &rng) {
  const int target =
      static_cast<int>(rng.uniform_int(cfg.train_min_long, cfg.train_max_long));
  SceneImage out = resize_with_boxes(img, target);
  if (rng.bernoulli(cfg.flip_prob)) out = flip_horizontal(out);
  return out;
}

SceneImage test_transform(const SceneImage &img, const TransformConfig &cfg) {
  // Fit inside the canonical canvas preserving aspect ratio, then pad. The
  // short side is rounded by the resize, so back off if rounding overshoots.
  const float sx = static_cast<float>(cfg.test_w) / static_cast<float>(img.width());
  const float sy = static_cast<float>(cfg.test_h) / static_cast<float>(img.height());
  const float s = std::min(sx, sy);
  int long_side = std::max(1, static_cast<int>(std::lround(
                                  s * static_cast<float>(std::max(img.width(), img.height())))));
  SceneImage resized = resize_with_boxes(img, long_side);
  while (long_side > 1 && (resized.width() > cfg.test_w || resized.height() > cfg.test_h))
    resized = resize_with_boxes(img, --long_side);
  return pad_to(resized, cfg.test_h, cfg.test_w);
}

}  // namespace alignps
