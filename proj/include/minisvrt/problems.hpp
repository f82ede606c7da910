#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "minisvrt/contour.hpp"
#include "minisvrt/errors.hpp"
#include "minisvrt/parallel.hpp"
#include "minisvrt/raster.hpp"
#include "minisvrt/rng.hpp"

namespace minisvrt {

enum class ProblemId { kP1, kP5, kP20, kP21 };
enum class Label { kNegative = 0, kPositive = 1 };
enum class Split { kTrain = 0, kVal = 1, kTest = 2 };

inline const char* to_string(ProblemId p) {
  switch (p) {
    case ProblemId::kP1: return "p1";
    case ProblemId::kP5: return "p5";
    case ProblemId::kP20: return "p20";
    case ProblemId::kP21: return "p21";
  }
  throw ArgumentError("unknown problem id");
}

inline ProblemId problem_from_string(const std::string& s) {
  if (s == "p1") return ProblemId::kP1;
  if (s == "p5") return ProblemId::kP5;
  if (s == "p20") return ProblemId::kP20;
  if (s == "p21") return ProblemId::kP21;
  throw ArgumentError("unknown problem: " + s);
}

inline const char* to_string(Label l) { return l == Label::kPositive ? "positive" : "negative"; }

inline Label label_from_string(const std::string& s) {
  if (s == "positive") return Label::kPositive;
  if (s == "negative") return Label::kNegative;
  throw ArgumentError("unknown label: " + s);
}

inline const char* to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  throw ArgumentError("unknown split");
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ArgumentError("unknown split: " + s);
}

// Transform family that defines "same shape" for each problem.
inline TransformClass transform_class(ProblemId p) {
  switch (p) {
    case ProblemId::kP1: return TransformClass::kTranslation;
    case ProblemId::kP5: return TransformClass::kTranslation;
    case ProblemId::kP20: return TransformClass::kTranslationMirror;
    case ProblemId::kP21: return TransformClass::kSimilarity;
  }
  throw ArgumentError("unknown problem id");
}

inline int num_shapes(ProblemId p) { return p == ProblemId::kP5 ? 4 : 2; }

// One generated image with its full generative provenance. Poses are stored
// in rule units: translation is the shape center in image pixels, scale is
// relative to the base shape radius (so "same scale" reads as scale 1).
struct SampleRecord {
  std::string image_path;  // relative to the manifest directory
  Label label = Label::kNegative;
  ProblemId problem = ProblemId::kP1;
  std::vector<std::uint64_t> contour_seeds;  // one per shape, repeats allowed
  std::vector<Pose> poses;                   // one per shape
  int canvas_side = 0;
};

struct SplitCounts {
  int train = 0;
  int val = 0;
  int test = 0;

  int of(Split s) const {
    switch (s) {
      case Split::kTrain: return train;
      case Split::kVal: return val;
      case Split::kTest: return test;
    }
    throw ArgumentError("unknown split");
  }
};

struct DatasetManifest {
  int format_version = 1;
  ProblemId problem = ProblemId::kP1;
  std::uint64_t master_seed = 0;
  int canvas_side = 0;
  SplitCounts counts;
  std::vector<SampleRecord> records;  // ordered by (split, index)
};

// Generation constants. canvas_side is recorded per sample; the remaining
// fields are fixed by format_version 1, so (record, config defaults) is
// enough to regenerate any sample bit-exactly.
struct GenConfig {
  int canvas_side = 128;
  GenParams contour;
  int stroke_width = 1;
  double base_radius_fraction = 0.12;  // base shape radius = fraction * side
  double border_px = 8.0;              // ink must stay this far from the edges
  double min_gap_px = 2.0;             // minimum separation between ink boxes
  int placement_attempts = 1000;       // per shape, per layout pass
  int placement_restarts = 20;         // full-layout retries
  int distinct_draws = 64;             // contour redraws per shape slot
  double distinct_gate = 0.02;         // contours farther than this are "different"
  double same_gate = 1e-3;             // rendered residual below this is "same"
  double p21_min_scale = 0.5;
  double p21_max_scale = 1.4;

  double base_radius(int side) const { return base_radius_fraction * side; }
};

struct GeneratedSample {
  SampleRecord record;
  ImageGray image;
};

// ---------------------------------------------------------------------------
// Pose handling
// ---------------------------------------------------------------------------

// Stored poses are relative; rendering folds the base radius into the scale.
inline Pose render_pose(const Pose& relative, double base_radius_px) {
  Pose p = relative;
  p.scale = relative.scale * base_radius_px;
  return p;
}

// Same shape in units of the base radius: the frame in which the congruence
// gates (same_gate / distinct_gate) are calibrated.
inline Pose rule_frame_pose(const Pose& relative, double base_radius_px) {
  Pose p = relative;
  p.tx = relative.tx / base_radius_px;
  p.ty = relative.ty / base_radius_px;
  return p;
}

namespace detail {

// Pose parameters other than translation, drawn identically for both labels
// so that no pose statistic leaks the class.
template <typename Cfg>
inline Pose draw_shape_pose(ProblemId prob, int shape_idx, Rng& rng, const Cfg& cfg) {
  Pose pose;
  switch (prob) {
    case ProblemId::kP1:
    case ProblemId::kP5:
      break;  // translation only
    case ProblemId::kP20:
      if (shape_idx == 1) pose.mirror_axis = rng.uniform(0.0, kPi);
      break;
    case ProblemId::kP21:
      pose.rotation = rng.uniform(0.0, kTwoPi);
      pose.scale = rng.uniform(cfg.p21_min_scale, cfg.p21_max_scale);
      break;
  }
  return pose;
}

struct InkBox {
  Box box;  // ink bounds (stroke included) once centered at the chosen translation
};

inline bool boxes_separated(const Box& a, const Box& b, double gap) {
  return a.max_x + gap <= b.min_x || b.max_x + gap <= a.min_x || a.max_y + gap <= b.min_y ||
         b.max_y + gap <= a.min_y;
}

}  // namespace detail

// Distinctness convention shared by generation and verification: for shape
// slots i < j, the residual of contour j onto contour i must exceed the gate.
inline bool contours_distinct(const Contour& earlier, const Contour& later, TransformClass cls,
                              double gate) {
  return congruence_residual(later.vertices, earlier.vertices, cls) > gate;
}

// ---------------------------------------------------------------------------
// Sample generation
// ---------------------------------------------------------------------------

inline GeneratedSample gen_sample(ProblemId prob, Label label, std::uint64_t seed,
                                  const GenConfig& cfg = {}) {
  Rng rng(seed);
  const int m = num_shapes(prob);
  const TransformClass cls = transform_class(prob);
  const double base = cfg.base_radius(cfg.canvas_side);

  // Distinct contour slots per (problem, label).
  int n_distinct;
  if (label == Label::kPositive)
    n_distinct = prob == ProblemId::kP5 ? 2 : 1;
  else
    n_distinct = prob == ProblemId::kP5 ? 4 : 2;

  std::vector<std::uint64_t> slot_seeds;
  std::vector<Contour> slot_contours;
  for (int slot = 0; slot < n_distinct; ++slot) {
    bool accepted = false;
    for (int attempt = 0; attempt < cfg.distinct_draws; ++attempt) {
      std::uint64_t s = rng.next_u64();
      Contour c = sample_contour(s, cfg.contour);
      bool ok = true;
      for (const auto& prior : slot_contours)
        if (!contours_distinct(prior, c, cls, cfg.distinct_gate)) {
          ok = false;
          break;
        }
      if (ok) {
        slot_seeds.push_back(s);
        slot_contours.push_back(std::move(c));
        accepted = true;
        break;
      }
    }
    if (!accepted)
      throw GenerationError("gen_sample: could not draw a distinct contour (seed " +
                            std::to_string(seed) + ")");
  }

  // Map slots to shape instances.
  std::vector<int> shape_slot(static_cast<std::size_t>(m));
  if (label == Label::kPositive)
    for (int i = 0; i < m; ++i) shape_slot[static_cast<std::size_t>(i)] = i / 2;  // AA / AABB
  else
    for (int i = 0; i < m; ++i) shape_slot[static_cast<std::size_t>(i)] = i;

  SampleRecord rec;
  rec.label = label;
  rec.problem = prob;
  rec.canvas_side = cfg.canvas_side;
  for (int i = 0; i < m; ++i)
    rec.contour_seeds.push_back(slot_seeds[static_cast<std::size_t>(shape_slot[static_cast<std::size_t>(i)])]);

  // Non-translation pose parameters.
  std::vector<Pose> poses;
  for (int i = 0; i < m; ++i) poses.push_back(detail::draw_shape_pose(prob, i, rng, cfg));

  // Ink bounds of each shape posed at the origin.
  const double ink_r = 0.5 * cfg.stroke_width;
  std::vector<Box> origin_box;
  for (int i = 0; i < m; ++i) {
    Pose at_origin = render_pose(poses[static_cast<std::size_t>(i)], base);
    at_origin.tx = 0.0;
    at_origin.ty = 0.0;
    auto pts = apply_pose(slot_contours[static_cast<std::size_t>(shape_slot[static_cast<std::size_t>(i)])], at_origin);
    Box b = bbox(pts);
    origin_box.push_back({b.min_x - ink_r, b.min_y - ink_r, b.max_x + ink_r, b.max_y + ink_r});
  }

  // Placement: uniform centers inside the border, rejecting layouts that
  // violate the pairwise gap. A full-layout restart redraws every center.
  const double lo_edge = cfg.border_px;
  const double hi_edge = static_cast<double>(cfg.canvas_side) - cfg.border_px;
  bool placed_all = false;
  for (int restart = 0; restart <= cfg.placement_restarts && !placed_all; ++restart) {
    std::vector<Box> placed;
    placed_all = true;
    for (int i = 0; i < m; ++i) {
      const Box& ob = origin_box[static_cast<std::size_t>(i)];
      double cx_lo = lo_edge - ob.min_x, cx_hi = hi_edge - ob.max_x;
      double cy_lo = lo_edge - ob.min_y, cy_hi = hi_edge - ob.max_y;
      if (cx_lo > cx_hi || cy_lo > cy_hi)
        throw GenerationError("gen_sample: shape does not fit the canvas");
      bool placed_one = false;
      for (int attempt = 0; attempt < cfg.placement_attempts; ++attempt) {
        double cx = rng.uniform(cx_lo, cx_hi);
        double cy = rng.uniform(cy_lo, cy_hi);
        Box candidate{ob.min_x + cx, ob.min_y + cy, ob.max_x + cx, ob.max_y + cy};
        bool ok = true;
        for (const auto& other : placed)
          if (!detail::boxes_separated(candidate, other, cfg.min_gap_px)) {
            ok = false;
            break;
          }
        if (ok) {
          placed.push_back(candidate);
          poses[static_cast<std::size_t>(i)].tx = cx;
          poses[static_cast<std::size_t>(i)].ty = cy;
          placed_one = true;
          break;
        }
      }
      if (!placed_one) {
        placed_all = false;
        break;
      }
    }
  }
  if (!placed_all)
    throw GenerationError("gen_sample: placement budget exhausted (seed " + std::to_string(seed) +
                          ")");
  rec.poses = poses;

  // Render through the same path the verifier uses.
  std::vector<std::vector<Point2>> polylines;
  for (int i = 0; i < m; ++i)
    polylines.push_back(apply_pose(slot_contours[static_cast<std::size_t>(shape_slot[static_cast<std::size_t>(i)])],
                                   render_pose(poses[static_cast<std::size_t>(i)], base)));
  GeneratedSample out;
  out.record = std::move(rec);
  out.image = rasterize(polylines, cfg.canvas_side, cfg.stroke_width);
  return out;
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

// Re-derives everything a sample claims from its provenance and checks the
// problem rule, the label, and the stored bytes. Returns false with a reason
// for records that fail; throws VerificationError only for records that
// cannot be examined at all.
inline bool verify_sample(const SampleRecord& rec, const ImageGray& image,
                          const GenConfig& cfg_in = {}, std::string* reason = nullptr) {
  auto fail = [&](const std::string& why) {
    if (reason) *reason = why;
    return false;
  };
  GenConfig cfg = cfg_in;
  cfg.canvas_side = rec.canvas_side;
  const int m = num_shapes(rec.problem);
  const TransformClass cls = transform_class(rec.problem);
  const double base = cfg.base_radius(cfg.canvas_side);

  if (rec.canvas_side < 32) return fail("canvas too small");
  if (static_cast<int>(rec.contour_seeds.size()) != m) return fail("wrong shape count");
  if (rec.poses.size() != rec.contour_seeds.size()) return fail("pose/seed count mismatch");
  for (const auto& p : rec.poses) {
    if (!std::isfinite(p.tx) || !std::isfinite(p.ty) || !std::isfinite(p.rotation) ||
        !std::isfinite(p.scale))
      return fail("non-finite pose");
    if (p.scale < 0.3 || p.scale > 2.0) return fail("pose scale out of range");
    if (p.rotation < 0.0 || p.rotation >= kTwoPi) return fail("pose rotation out of range");
    if (p.mirror_axis && (*p.mirror_axis < 0.0 || *p.mirror_axis >= kPi))
      return fail("mirror axis out of range");
  }

  // Label-dependent seed multiplicity.
  const auto& s = rec.contour_seeds;
  if (rec.label == Label::kPositive) {
    bool ok = m == 2 ? s[0] == s[1] : (s[0] == s[1] && s[2] == s[3] && s[0] != s[2]);
    if (!ok) return fail("positive sample lacks identical-shape structure");
  } else {
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j)
        if (s[static_cast<std::size_t>(i)] == s[static_cast<std::size_t>(j)])
          return fail("negative sample reuses a contour seed");
  }

  // Regenerate contours (distinct seeds only once).
  std::vector<Contour> contours;
  for (int i = 0; i < m; ++i) {
    bool seen = false;
    for (int j = 0; j < i; ++j)
      if (s[static_cast<std::size_t>(j)] == s[static_cast<std::size_t>(i)]) {
        contours.push_back(contours[static_cast<std::size_t>(j)]);
        seen = true;
        break;
      }
    if (!seen) {
      try {
        contours.push_back(sample_contour(s[static_cast<std::size_t>(i)], cfg.contour));
      } catch (const GenerationError&) {
        return fail("contour seed does not generate");
      }
    }
  }

  // Rule gates. Positive pairs must be congruent as rendered (in base-radius
  // units); distinct slots must stay beyond the distinct gate as raw shapes.
  auto rule_poly = [&](int i) {
    return apply_pose(contours[static_cast<std::size_t>(i)],
                      rule_frame_pose(rec.poses[static_cast<std::size_t>(i)], base));
  };
  if (rec.label == Label::kPositive) {
    std::vector<std::pair<int, int>> pairs =
        m == 2 ? std::vector<std::pair<int, int>>{{0, 1}}
               : std::vector<std::pair<int, int>>{{0, 1}, {2, 3}};
    for (auto [i, j] : pairs) {
      auto a = rule_poly(j);
      auto b = rule_poly(i);
      if (congruence_residual(a, b, cls) >= cfg.same_gate)
        return fail("positive pair fails the congruence gate");
    }
    if (m == 4 && !contours_distinct(contours[0], contours[2], cls, cfg.distinct_gate))
      return fail("positive pairs are not mutually distinct");
  } else {
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j)
        if (!contours_distinct(contours[static_cast<std::size_t>(i)],
                               contours[static_cast<std::size_t>(j)], cls, cfg.distinct_gate))
          return fail("negative shapes fail the distinctness gate");
  }

  // Placement invariants from the re-posed polylines.
  const double ink_r = 0.5 * cfg.stroke_width;
  std::vector<Box> boxes;
  std::vector<std::vector<Point2>> polylines;
  for (int i = 0; i < m; ++i) {
    polylines.push_back(apply_pose(contours[static_cast<std::size_t>(i)],
                                   render_pose(rec.poses[static_cast<std::size_t>(i)], base)));
    Box b = bbox(polylines.back());
    boxes.push_back({b.min_x - ink_r, b.min_y - ink_r, b.max_x + ink_r, b.max_y + ink_r});
  }
  for (const auto& b : boxes)
    if (b.min_x < cfg.border_px || b.min_y < cfg.border_px ||
        b.max_x > rec.canvas_side - cfg.border_px || b.max_y > rec.canvas_side - cfg.border_px)
      return fail("shape violates the canvas border");
  for (std::size_t i = 0; i < boxes.size(); ++i)
    for (std::size_t j = i + 1; j < boxes.size(); ++j)
      if (!detail::boxes_separated(boxes[i], boxes[j], cfg.min_gap_px))
        return fail("shapes violate the separation margin");

  // Byte-exact render comparison.
  ImageGray expected = rasterize(polylines, rec.canvas_side, cfg.stroke_width);
  if (!(expected == image)) return fail("stored image does not match re-render");
  if (reason) reason->clear();
  return true;
}

// Disk-backed variant; unreadable or malformed inputs throw
// VerificationError rather than returning false.
inline bool verify_sample_file(const std::filesystem::path& manifest_dir, const SampleRecord& rec,
                               const GenConfig& cfg = {}, std::string* reason = nullptr) {
  ImageGray img;
  try {
    img = read_pgm(manifest_dir / rec.image_path);
  } catch (const Error& e) {
    throw VerificationError(std::string("verify_sample: cannot read image: ") + e.what());
  }
  return verify_sample(rec, img, cfg, reason);
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json pose_to_json(const Pose& p) {
  nlohmann::json j{{"tx", p.tx}, {"ty", p.ty}, {"rotation", p.rotation}, {"scale", p.scale}};
  if (p.mirror_axis)
    j["mirror_axis"] = *p.mirror_axis;
  else
    j["mirror_axis"] = nullptr;
  return j;
}

inline Pose pose_from_json(const nlohmann::json& j) {
  Pose p;
  p.tx = j.at("tx").get<double>();
  p.ty = j.at("ty").get<double>();
  p.rotation = j.at("rotation").get<double>();
  p.scale = j.at("scale").get<double>();
  if (!j.at("mirror_axis").is_null()) p.mirror_axis = j.at("mirror_axis").get<double>();
  return p;
}

inline nlohmann::json record_to_json(const SampleRecord& r) {
  nlohmann::json poses = nlohmann::json::array();
  for (const auto& p : r.poses) poses.push_back(pose_to_json(p));
  return nlohmann::json{{"image_path", r.image_path},
                        {"label", to_string(r.label)},
                        {"problem", to_string(r.problem)},
                        {"contour_seeds", r.contour_seeds},
                        {"poses", poses},
                        {"canvas_side", r.canvas_side}};
}

inline SampleRecord record_from_json(const nlohmann::json& j) {
  SampleRecord r;
  r.image_path = j.at("image_path").get<std::string>();
  r.label = label_from_string(j.at("label").get<std::string>());
  r.problem = problem_from_string(j.at("problem").get<std::string>());
  r.contour_seeds = j.at("contour_seeds").get<std::vector<std::uint64_t>>();
  for (const auto& pj : j.at("poses")) r.poses.push_back(pose_from_json(pj));
  r.canvas_side = j.at("canvas_side").get<int>();
  return r;
}

}  // namespace detail

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_manifest: cannot open " + path.string());
  nlohmann::json header{{"format_version", m.format_version},
                        {"problem", to_string(m.problem)},
                        {"master_seed", m.master_seed},
                        {"canvas_side", m.canvas_side},
                        {"counts",
                         {{"train", m.counts.train}, {"val", m.counts.val}, {"test", m.counts.test}}}};
  out << header.dump() << "\n";
  for (const auto& r : m.records) out << detail::record_to_json(r).dump() << "\n";
  if (!out) throw IoError("write_manifest: write failed for " + path.string());
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_manifest: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("read_manifest: empty manifest " + path.string());
  DatasetManifest m;
  try {
    nlohmann::json header = nlohmann::json::parse(line);
    m.format_version = header.at("format_version").get<int>();
    m.problem = problem_from_string(header.at("problem").get<std::string>());
    m.master_seed = header.at("master_seed").get<std::uint64_t>();
    m.canvas_side = header.at("canvas_side").get<int>();
    m.counts.train = header.at("counts").at("train").get<int>();
    m.counts.val = header.at("counts").at("val").get<int>();
    m.counts.test = header.at("counts").at("test").get<int>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      m.records.push_back(detail::record_from_json(nlohmann::json::parse(line)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("read_manifest: malformed manifest " + path.string() + ": " + e.what());
  }
  if (m.format_version != 1)
    throw FormatError("read_manifest: unsupported format_version in " + path.string());
  return m;
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

inline std::uint64_t sample_seed(std::uint64_t master_seed, Split split, int index) {
  return derive_seed(master_seed, static_cast<std::uint64_t>(split),
                     static_cast<std::uint64_t>(index));
}

inline Label sample_label(int index) { return index % 2 == 0 ? Label::kPositive : Label::kNegative; }

// Generates <out_dir>/<problem>/<split>/<index>.pgm plus manifest.jsonl.
// Per-sample seeds depend only on (master_seed, split, index), so the output
// is byte-identical for any worker count.
inline DatasetManifest gen_dataset(ProblemId prob, int n_train, int n_val, int n_test,
                                   std::uint64_t master_seed,
                                   const std::filesystem::path& out_dir, GenConfig cfg = {},
                                   int jobs = 1) {
  namespace fs = std::filesystem;
  if (n_train < 0 || n_val < 0 || n_test < 0)
    throw ArgumentError("gen_dataset: negative split count");
  if (n_train % 2 || n_val % 2 || n_test % 2)
    throw ArgumentError("gen_dataset: split counts must be even for exact balance");

  fs::path root = out_dir / to_string(prob);
  fs::create_directories(root);

  DatasetManifest manifest;
  manifest.problem = prob;
  manifest.master_seed = master_seed;
  manifest.canvas_side = cfg.canvas_side;
  manifest.counts = {n_train, n_val, n_test};

  int old_threads = max_threads();
  set_max_threads(jobs);
  try {
    for (Split split : {Split::kTrain, Split::kVal, Split::kTest}) {
      int n = manifest.counts.of(split);
      if (n == 0) continue;
      fs::create_directories(root / to_string(split));
      std::vector<SampleRecord> records(static_cast<std::size_t>(n));
      parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
        int index = static_cast<int>(i);
        GeneratedSample s = gen_sample(prob, sample_label(index), sample_seed(master_seed, split, index), cfg);
        s.record.image_path = std::string(to_string(split)) + "/" + std::to_string(index) + ".pgm";
        write_pgm(s.image, root / s.record.image_path);
        records[i] = std::move(s.record);
      });
      for (auto& r : records) manifest.records.push_back(std::move(r));
    }
  } catch (...) {
    set_max_threads(old_threads);
    throw;
  }
  set_max_threads(old_threads);
  write_manifest(manifest, root / "manifest.jsonl");
  return manifest;
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

struct LoadedSample {
  ImageGray image;
  int label = 0;  // negative -> 0, positive -> 1
};

// Streams (image, label) pairs for one split in a deterministic order: the
// manifest order, or a seeded shuffle of it.
class DatasetStream {
 public:
  DatasetStream(const DatasetManifest& manifest, const std::filesystem::path& manifest_dir,
                Split split, std::optional<std::uint64_t> shuffle_seed = std::nullopt)
      : manifest_(&manifest), dir_(manifest_dir) {
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
      const std::string prefix = std::string(to_string(split)) + "/";
      if (manifest.records[i].image_path.rfind(prefix, 0) == 0) order_.push_back(i);
    }
    if (shuffle_seed) {
      Rng rng(*shuffle_seed);
      for (std::size_t i = order_.size(); i > 1; --i)
        std::swap(order_[i - 1], order_[static_cast<std::size_t>(rng.below(i))]);
    }
  }

  std::size_t size() const { return order_.size(); }

  const SampleRecord& record(std::size_t pos) const { return manifest_->records[order_[pos]]; }

  LoadedSample load(std::size_t pos) const {
    const SampleRecord& rec = record(pos);
    LoadedSample out;
    try {
      out.image = read_pgm(dir_ / rec.image_path);
    } catch (const IoError& e) {
      throw IoError(std::string("load_dataset: missing image: ") + e.what());
    }
    out.label = rec.label == Label::kPositive ? 1 : 0;
    return out;
  }

  bool next(LoadedSample& out) {
    if (cursor_ >= order_.size()) return false;
    out = load(cursor_++);
    return true;
  }

 private:
  const DatasetManifest* manifest_;
  std::filesystem::path dir_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Pose statistics (anti-shortcut checks)
// ---------------------------------------------------------------------------

struct PoseStats {
  std::vector<double> tx, ty, rotation, scale;
  std::vector<double> mirrored;  // 0/1 per shape
};

inline PoseStats collect_pose_stats(std::span<const SampleRecord> records) {
  PoseStats s;
  for (const auto& r : records)
    for (const auto& p : r.poses) {
      s.tx.push_back(p.tx);
      s.ty.push_back(p.ty);
      s.rotation.push_back(p.rotation);
      s.scale.push_back(p.scale);
      s.mirrored.push_back(p.mirror_axis ? 1.0 : 0.0);
    }
  return s;
}

// Two-sample chi-square statistic over equal-width bins on [lo, hi]. Bins
// empty in both samples are skipped; *df_out gets (occupied bins - 1).
inline double chi_square_two_sample(std::span<const double> xs, std::span<const double> ys,
                                    double lo, double hi, int bins, int* df_out = nullptr) {
  if (xs.empty() || ys.empty()) throw ArgumentError("chi_square_two_sample: empty sample");
  if (!(hi > lo) || bins < 2) throw ArgumentError("chi_square_two_sample: bad binning");
  std::vector<double> cx(static_cast<std::size_t>(bins), 0.0), cy(static_cast<std::size_t>(bins), 0.0);
  auto bin_of = [&](double v) {
    int b = static_cast<int>((v - lo) / (hi - lo) * bins);
    return std::clamp(b, 0, bins - 1);
  };
  for (double v : xs) cx[static_cast<std::size_t>(bin_of(v))] += 1.0;
  for (double v : ys) cy[static_cast<std::size_t>(bin_of(v))] += 1.0;
  double nx = static_cast<double>(xs.size()), ny = static_cast<double>(ys.size());
  double stat = 0.0;
  int used = 0;
  for (int b = 0; b < bins; ++b) {
    double rx = cx[static_cast<std::size_t>(b)], ry = cy[static_cast<std::size_t>(b)];
    double total = rx + ry;
    if (total == 0.0) continue;
    ++used;
    double ex = total * nx / (nx + ny);
    double ey = total * ny / (nx + ny);
    stat += (rx - ex) * (rx - ex) / ex + (ry - ey) * (ry - ey) / ey;
  }
  if (df_out) *df_out = used > 1 ? used - 1 : 0;
  return stat;
}

// Upper 1% critical values of the chi-square distribution.
inline double chi_square_critical_alpha01(int df) {
  static constexpr std::array<double, 32> kTable = {
      0.0,     6.6349,  9.2103,  11.3449, 13.2767, 15.0863, 16.8119, 18.4753,
      20.0902, 21.6660, 23.2093, 24.7250, 26.2170, 27.6882, 29.1412, 30.5779,
      31.9999, 33.4087, 34.8053, 36.1909, 37.5662, 38.9322, 40.2894, 41.6384,
      42.9798, 44.3141, 45.6417, 46.9629, 48.2782, 49.5879, 50.8922, 52.1914};
  if (df <= 0) return 0.0;
  if (df >= static_cast<int>(kTable.size()))
    throw ArgumentError("chi_square_critical_alpha01: df out of table range");
  return kTable[static_cast<std::size_t>(df)];
}

}  // namespace minisvrt
