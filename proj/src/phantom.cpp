#include "dinp/phantom.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <stdexcept>

namespace dinp {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(Sequence s) {
  static constexpr const char* names[] = {"S1", "S2", "S3", "S4"};
  return names[static_cast<int>(s)];
}

Sequence parse_sequence(const std::string& name) {
  for (Sequence s : kSequences)
    if (to_string(s) == name) return s;
  throw std::invalid_argument("unknown sequence tag '" + name + "'");
}

std::string to_string(Tissue t) {
  static constexpr const char* names[] = {"background", "brain", "csf", "core", "edema", "enhancement"};
  return names[static_cast<int>(t)];
}

IntensityTable default_intensity_table() {
  IntensityTable t{};
  auto row = [&](Tissue tissue, std::array<double, 4> means, double spread) {
    for (int s = 0; s < 4; ++s) t[static_cast<int>(tissue)][s] = {means[s], spread};
  };
  row(Tissue::background, {0.0, 0.0, 0.0, 0.0}, 0.0);
  row(Tissue::brain, {0.40, 0.40, 0.40, 0.40}, 0.02);
  // Ventricles are the only normal structure whose contrast changes with the
  // sequence, so context alone identifies which sequence a slice is.
  row(Tissue::csf, {0.10, 0.25, 0.90, 0.60}, 0.02);
  row(Tissue::core, {0.15, 0.15, 0.55, 0.45}, 0.03);
  row(Tissue::edema, {0.30, 0.30, 0.70, 0.75}, 0.03);
  row(Tissue::enhancement, {0.45, 0.85, 0.60, 0.55}, 0.03);
  return t;
}

void PhantomSpec::validate() const {
  if (image_size < 32 || image_size % 2 != 0)
    throw std::invalid_argument("phantom image_size must be even and >= 32, got " + std::to_string(image_size));
  if (!(tumor_probability >= 0.0 && tumor_probability <= 1.0))
    throw std::invalid_argument("tumor_probability must lie in [0,1]");
  if (!(texture_amplitude >= 0.0)) throw std::invalid_argument("texture_amplitude must be >= 0");
  if (studies < 0 || slices_per_study < 1) throw std::invalid_argument("studies >= 0 and slices_per_study >= 1 required");
  for (int t = 0; t < kTissueCount; ++t)
    for (int s = 0; s < 4; ++s) {
      const auto& st = intensities[t][s];
      if (!(st.mean >= 0.0 && st.mean <= 1.0))
        throw std::invalid_argument("intensity mean for " + to_string(static_cast<Tissue>(t)) + "/" +
                                    to_string(static_cast<Sequence>(s)) + " outside [0,1]");
      if (!(st.spread >= 0.0)) throw std::invalid_argument("intensity spread must be >= 0");
    }
}

namespace {

struct Ellipse {
  double cy, cx, ry, rx;
  bool contains(double y, double x) const {
    const double dy = (y - cy) / ry, dx = (x - cx) / rx;
    return dy * dy + dx * dx <= 1.0;
  }
};

// Star-shaped lesion outline r(θ) = radius·(1 + Σ a_k cos(kθ − φ_k)).
struct LesionShape {
  double cy, cx, radius;
  std::array<double, 3> amp, phase;

  double boundary(double theta) const {
    double r = 1.0;
    for (int k = 0; k < 3; ++k) r += amp[k] * std::cos((k + 2) * theta - phase[k]);
    return radius * r;
  }
  bool contains(double y, double x, double scale) const {
    const double dy = y - cy, dx = x - cx;
    const double d = std::sqrt(dy * dy + dx * dx);
    return d <= scale * boundary(std::atan2(dy, dx));
  }
};

}  // namespace

PhantomSlice generate_phantom(const PhantomSpec& spec, std::uint64_t slice_seed, double axial_position) {
  spec.validate();
  const int n = spec.image_size;
  Rng rng(slice_seed);
  const double pos = std::clamp(axial_position, 0.0, 1.0);
  const double u = (pos - 0.5) / 0.5;
  const double scale = std::sqrt(std::max(0.0, 1.0 - 0.98 * u * u));

  Ellipse brain{n / 2.0 + rng.uniform(-0.03, 0.03) * n, n / 2.0 + rng.uniform(-0.03, 0.03) * n,
                rng.uniform(0.38, 0.44) * n * scale, rng.uniform(0.32, 0.38) * n * scale};
  brain.ry = std::max(brain.ry, 0.5);
  brain.rx = std::max(brain.rx, 0.5);

  std::vector<Ellipse> ventricles;
  if (scale > 0.45) {
    const double gap = rng.uniform(0.06, 0.08) * n * scale;
    const double ry = rng.uniform(0.09, 0.12) * n * scale, rx = rng.uniform(0.035, 0.05) * n * scale;
    const double cy = brain.cy + rng.uniform(-0.04, 0.02) * n;
    ventricles.push_back({cy, brain.cx - gap, ry, rx});
    ventricles.push_back({cy, brain.cx + gap, ry, rx});
  }

  std::optional<LesionShape> lesion;
  double enh_scale = 0.0, core_scale = 0.0;
  const bool tumor = rng.bernoulli(spec.tumor_probability);
  if (tumor && scale > 0.4) {
    const double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
    LesionShape shape{};
    shape.cy = brain.cy + rng.uniform(-0.35, 0.35) * brain.ry;
    shape.cx = brain.cx + side * rng.uniform(0.35, 0.55) * brain.rx;
    shape.radius = rng.uniform(0.08, 0.15) * n * std::max(scale, 0.6);
    for (int k = 0; k < 3; ++k) {
      shape.amp[k] = rng.uniform(0.0, 0.12);
      shape.phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    enh_scale = rng.uniform(0.5, 0.7);
    core_scale = rng.bernoulli(0.85) ? enh_scale * rng.uniform(0.35, 0.6) : 0.0;
    // Shrink until the edema outline sits inside the brain ellipse.
    for (int attempt = 0; attempt < 8; ++attempt) {
      bool inside = true;
      for (int a = 0; a < 64 && inside; ++a) {
        const double th = 2.0 * std::numbers::pi * a / 64.0;
        const double r = shape.boundary(th);
        inside = brain.contains(shape.cy + r * std::sin(th), shape.cx + r * std::cos(th));
      }
      if (inside) break;
      shape.radius *= 0.85;
    }
    lesion = shape;
  }

  PhantomSlice out;
  out.label = LabelMask(n, n);
  out.brain = Mask(n, n);
  out.tissue.assign(static_cast<std::size_t>(n) * n, Tissue::background);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double y = r + 0.5, x = c + 0.5;
      if (!brain.contains(y, x)) continue;
      const std::size_t i = static_cast<std::size_t>(r) * n + c;
      out.brain.bits[i] = 1;
      Tissue t = Tissue::brain;
      for (const auto& v : ventricles)
        if (v.contains(y, x)) t = Tissue::csf;
      if (lesion && lesion->contains(y, x, 1.0)) {
        t = Tissue::edema;
        if (lesion->contains(y, x, enh_scale)) t = Tissue::enhancement;
        if (core_scale > 0.0 && lesion->contains(y, x, core_scale)) t = Tissue::core;
      }
      out.tissue[i] = t;
      switch (t) {
        case Tissue::core: out.label.values[i] = LabelMask::kCore; break;
        case Tissue::edema: out.label.values[i] = LabelMask::kEdema; break;
        case Tissue::enhancement: out.label.values[i] = LabelMask::kEnhancement; break;
        default: break;
      }
    }
  }

  // Smooth texture shared by all sequences of the slice.
  std::vector<double> texture(static_cast<std::size_t>(n) * n, 0.0);
  for (int w = 0; w < 3; ++w) {
    const double wavelength = rng.uniform(0.25, 0.75) * n;
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double ky = std::sin(angle) * 2.0 * std::numbers::pi / wavelength;
    const double kx = std::cos(angle) * 2.0 * std::numbers::pi / wavelength;
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) texture[static_cast<std::size_t>(r) * n + c] += std::cos(ky * r + kx * c + phase) / 3.0;
  }

  for (Sequence s : kSequences) {
    SliceImage img(n, n);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      const Tissue t = out.tissue[i];
      if (t == Tissue::background) continue;
      const auto& st = spec.stats(t, s);
      const double v = st.mean + st.spread * rng.normal() + spec.texture_amplitude * texture[i];
      img.pixels[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    out.images[static_cast<int>(s)] = std::move(img);
  }
  return out;
}

std::int64_t brain_bbox_area(const SliceImage& image, double threshold) {
  int r0 = image.height, r1 = -1, c0 = image.width, c1 = -1;
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c)
      if (image.at(r, c) > threshold) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
  if (r1 < 0) return 0;
  return static_cast<std::int64_t>(r1 - r0 + 1) * (c1 - c0 + 1);
}

Mask brain_region(const SliceImage& image, double threshold) {
  Mask m(image.height, image.width);
  for (int r = 0; r < image.height; ++r) {
    int first = -1, last = -1;
    for (int c = 0; c < image.width; ++c)
      if (image.at(r, c) > threshold) {
        if (first < 0) first = c;
        last = c;
      }
    for (int c = first; first >= 0 && c <= last; ++c) m.at(r, c) = 1;
  }
  return m;
}

namespace {

std::string study_name(int study) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "study%04d", study);
  return buf;
}

std::string slice_stem(const std::string& study, int slice) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03d", slice);
  return study + "_" + buf;
}

}  // namespace

SliceDataset generate_corpus(const PhantomSpec& spec) {
  spec.validate();
  SliceDataset ds;
  for (int study = 0; study < spec.studies; ++study) {
    const std::string id = study_name(study);
    for (int slice = 0; slice < spec.slices_per_study; ++slice) {
      const double pos = (slice + 0.5) / spec.slices_per_study;
      const auto ph = generate_phantom(spec, mix_seed(spec.seed, mix_seed(study, slice)), pos);
      if (!keep_slice(brain_bbox_area(ph.images[0]))) continue;
      const std::string stem = slice_stem(id, slice);
      ds.labels.push_back(ph.label);
      const auto area = static_cast<std::int64_t>(ph.label.tumor_area());
      for (Sequence s : kSequences) {
        ds.records.push_back({id, slice, s, "images/" + stem + "_" + to_string(s) + ".png", "labels/" + stem + ".png", area});
        ds.images.push_back(ph.images[static_cast<int>(s)].to_gray8());
        ds.label_of.push_back(ds.labels.size() - 1);
      }
    }
  }
  return ds;
}

std::string to_string(Split s) {
  static constexpr const char* names[] = {"train", "validation", "test"};
  return names[static_cast<int>(s)];
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "validation") return Split::validation;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + name + "'");
}

std::vector<std::size_t> SplitAssignment::records_in(Split split, std::span<const StudyRecord> records) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto it = by_study.find(records[i].study_id);
    if (it != by_study.end() && it->second == split) out.push_back(i);
  }
  return out;
}

std::size_t SplitAssignment::study_count(Split split) const {
  return static_cast<std::size_t>(
      std::count_if(by_study.begin(), by_study.end(), [split](const auto& kv) { return kv.second == split; }));
}

SplitAssignment split_dataset(std::span<const StudyRecord> records, const SplitOptions& options, Rng& rng) {
  const double total = options.ratios[0] + options.ratios[1] + options.ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || *std::min_element(options.ratios.begin(), options.ratios.end()) < 0.0)
    throw std::invalid_argument("split ratios must be nonnegative and sum to 1");
  if (records.empty()) throw std::invalid_argument("cannot split an empty record set");

  std::map<std::string, std::int64_t> area;
  for (const auto& r : records) area[r.study_id] += r.tumor_area;
  std::vector<std::pair<std::int64_t, std::string>> studies;
  for (const auto& [id, a] : area) studies.emplace_back(a, id);
  std::sort(studies.begin(), studies.end());

  SplitAssignment out;
  const int n = static_cast<int>(studies.size());
  if (n == 1) {
    out.by_study[studies[0].second] = Split::train;
    out.warnings.push_back("only one study: everything assigned to train, validation and test are empty");
    return out;
  }
  const int strata = options.strata > 0 ? options.strata : std::clamp(n / 20, 1, 10);
  if (n < strata * 3)
    throw std::invalid_argument(std::to_string(n) + " studies are too few for " + std::to_string(strata) +
                                " strata x 3 splits");

  int assigned_val = 0, assigned_test = 0, seen = 0;
  for (int s = 0; s < strata; ++s) {
    const int begin = static_cast<int>(static_cast<std::int64_t>(s) * n / strata);
    const int end = static_cast<int>(static_cast<std::int64_t>(s + 1) * n / strata);
    std::vector<std::string> ids;
    for (int i = begin; i < end; ++i) ids.push_back(studies[i].second);
    std::shuffle(ids.begin(), ids.end(), rng.engine());
    seen += end - begin;
    // Cumulative rounding keeps global counts within one study of the ratios.
    const int want_val = static_cast<int>(std::lround(seen * options.ratios[1])) - assigned_val;
    const int want_test = static_cast<int>(std::lround(seen * options.ratios[2])) - assigned_test;
    const int nv = std::clamp(want_val, 0, static_cast<int>(ids.size()));
    const int nt = std::clamp(want_test, 0, static_cast<int>(ids.size()) - nv);
    for (int i = 0; i < static_cast<int>(ids.size()); ++i)
      out.by_study[ids[i]] = i < nv ? Split::validation : (i < nv + nt ? Split::test : Split::train);
    assigned_val += nv;
    assigned_test += nt;
  }
  return out;
}

std::vector<std::size_t> oversample_tumor_slices(std::span<const StudyRecord> records,
                                                 std::span<const std::size_t> indices, int factor) {
  if (factor < 1) throw std::invalid_argument("oversampling factor must be >= 1");
  std::vector<std::size_t> out;
  out.reserve(indices.size() * static_cast<std::size_t>(factor));
  for (std::size_t i : indices) {
    const int copies = records[i].tumor_area > 0 ? factor : 1;
    for (int k = 0; k < copies; ++k) out.push_back(i);
  }
  return out;
}

namespace {

json record_to_json(const StudyRecord& r) {
  return json{{"study_id", r.study_id},     {"slice_index", r.slice_index}, {"sequence", to_string(r.sequence)},
              {"image_path", r.image_path}, {"label_path", r.label_path},   {"tumor_area", r.tumor_area}};
}

StudyRecord record_from_json(const json& j) {
  static const std::set<std::string> keys{"study_id", "slice_index", "sequence", "image_path", "label_path",
                                          "tumor_area"};
  for (const auto& [k, v] : j.items())
    if (!keys.contains(k)) throw std::runtime_error("manifest record has unknown field '" + k + "'");
  StudyRecord r;
  r.study_id = j.at("study_id").get<std::string>();
  r.slice_index = j.at("slice_index").get<int>();
  r.sequence = parse_sequence(j.at("sequence").get<std::string>());
  r.image_path = j.at("image_path").get<std::string>();
  r.label_path = j.at("label_path").get<std::string>();
  r.tumor_area = j.at("tumor_area").get<std::int64_t>();
  return r;
}

json splits_to_json(const SplitAssignment& s) {
  json j = json::object();
  for (const auto& [id, split] : s.by_study) j[id] = to_string(split);
  return j;
}

json read_manifest(const fs::path& root) {
  std::ifstream f(root / "manifest.json");
  if (!f) throw std::runtime_error("missing manifest " + (root / "manifest.json").string());
  json j = json::parse(f);
  if (j.value("format", std::string{}) != kDatasetFormat)
    throw std::runtime_error("manifest format is not " + std::string(kDatasetFormat));
  return j;
}

void write_manifest(const fs::path& root, const json& j) {
  std::ofstream f(root / "manifest.json");
  if (!f) throw std::runtime_error("cannot write manifest in " + root.string());
  f << j.dump(1) << '\n';
}

}  // namespace

void save_dataset(const fs::path& root, const SliceDataset& ds, const std::optional<SplitAssignment>& splits) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "labels");
  std::set<std::string> written_labels;
  json records = json::array();
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    write_png(root / r.image_path, ds.images[i]);
    if (written_labels.insert(r.label_path).second) write_png(root / r.label_path, ds.label(i).to_gray8());
    records.push_back(record_to_json(r));
  }
  json manifest{{"format", kDatasetFormat}, {"records", records}};
  if (splits) manifest["splits"] = splits_to_json(*splits);
  write_manifest(root, manifest);
}

SliceDataset load_dataset(const fs::path& root) {
  SliceDataset ds;
  if (!fs::exists(root / "manifest.json")) {
    if (fs::is_directory(root) && fs::is_empty(root)) return ds;
    throw std::runtime_error("missing manifest " + (root / "manifest.json").string());
  }
  const json manifest = read_manifest(root);
  std::map<std::string, std::size_t> label_index;
  for (const auto& jr : manifest.at("records")) {
    StudyRecord r = record_from_json(jr);
    Gray8 img = read_png(root / r.image_path);
    auto it = label_index.find(r.label_path);
    if (it == label_index.end()) {
      const Gray8 raw = read_png(root / r.label_path);
      ds.labels.push_back(LabelMask::from_gray8(raw, (root / r.label_path).string()));
      it = label_index.emplace(r.label_path, ds.labels.size() - 1).first;
    }
    const LabelMask& label = ds.labels[it->second];
    if (label.height != img.height || label.width != img.width)
      throw std::runtime_error("manifest/record mismatch: " + r.image_path + " and " + r.label_path +
                               " differ in size");
    if (static_cast<std::int64_t>(label.tumor_area()) != r.tumor_area)
      throw std::runtime_error("manifest/record mismatch: tumor_area of " + r.image_path + " is " +
                               std::to_string(r.tumor_area) + " but " + r.label_path + " has " +
                               std::to_string(label.tumor_area()));
    ds.records.push_back(std::move(r));
    ds.images.push_back(std::move(img));
    ds.label_of.push_back(it->second);
  }
  return ds;
}

std::optional<SplitAssignment> load_splits(const fs::path& root) {
  const json manifest = read_manifest(root);
  if (!manifest.contains("splits")) return std::nullopt;
  SplitAssignment s;
  for (const auto& [id, v] : manifest.at("splits").items()) s.by_study[id] = parse_split(v.get<std::string>());
  return s;
}

void save_splits(const fs::path& root, const SplitAssignment& splits) {
  json manifest = read_manifest(root);
  manifest["splits"] = splits_to_json(splits);
  write_manifest(root, manifest);
}

}  // namespace dinp
