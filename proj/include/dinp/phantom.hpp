#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dinp/image.hpp"
#include "dinp/rng.hpp"

namespace dinp {

/// Pseudo-sequences standing in for T1, T1CE, T2 and FLAIR contrasts.
enum class Sequence : std::uint8_t { S1 = 0, S2 = 1, S3 = 2, S4 = 3 };
inline constexpr std::array<Sequence, 4> kSequences{Sequence::S1, Sequence::S2, Sequence::S3, Sequence::S4};

std::string to_string(Sequence s);
Sequence parse_sequence(const std::string& name);

enum class Tissue : std::uint8_t { background = 0, brain, csf, core, edema, enhancement };
inline constexpr int kTissueCount = 6;

std::string to_string(Tissue t);

struct IntensityStats {
  double mean = 0.0;
  double spread = 0.0;
};

/// Indexed [tissue][sequence].
using IntensityTable = std::array<std::array<IntensityStats, 4>, kTissueCount>;

IntensityTable default_intensity_table();

struct PhantomSpec {
  int image_size = 64;
  double tumor_probability = 0.6;
  IntensityTable intensities = default_intensity_table();
  double texture_amplitude = 0.03;
  std::uint64_t seed = 0;
  int studies = 200;
  int slices_per_study = 40;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  const IntensityStats& stats(Tissue t, Sequence s) const {
    return intensities[static_cast<int>(t)][static_cast<int>(s)];
  }
};

struct PhantomSlice {
  std::array<SliceImage, 4> images;  // indexed by Sequence
  LabelMask label;
  Mask brain;
  std::vector<Tissue> tissue;  // per-pixel ground-truth class
};

/// Renders one slice. `axial_position` ∈ [0,1] scales the brain cross-section
/// (largest at 0.5). Pure function of (spec, slice_seed, axial_position).
PhantomSlice generate_phantom(const PhantomSpec& spec, std::uint64_t slice_seed, double axial_position = 0.5);

/// Slices whose brain bounding box is smaller than this are excluded.
inline constexpr std::int64_t kMinBrainBoxArea = 100;

/// Area of the tight rectangle around pixels brighter than `threshold`; 0 if none.
std::int64_t brain_bbox_area(const SliceImage& image, double threshold = 0.02);
inline bool keep_slice(std::int64_t brain_box_area) { return brain_box_area >= kMinBrainBoxArea; }

/// Pixels above `threshold`, with each row filled between its outermost hits
/// so dark interior structures count as brain.
Mask brain_region(const SliceImage& image, double threshold = 0.02);

struct StudyRecord {
  std::string study_id;
  int slice_index = 0;
  Sequence sequence = Sequence::S1;
  std::string image_path;
  std::string label_path;
  std::int64_t tumor_area = 0;

  bool operator==(const StudyRecord&) const = default;
};

/// Records plus their decoded rasters. `label_of[i]` indexes `labels` for
/// record i; the four sequences of one slice share a label.
struct SliceDataset {
  std::vector<StudyRecord> records;
  std::vector<Gray8> images;
  std::vector<LabelMask> labels;
  std::vector<std::size_t> label_of;

  std::size_t size() const { return records.size(); }
  SliceImage image(std::size_t record) const { return SliceImage::from_gray8(images.at(record)); }
  const LabelMask& label(std::size_t record) const { return labels.at(label_of.at(record)); }
};

/// Generates spec.studies × spec.slices_per_study slices in four sequences,
/// dropping slices that fail the brain-box filter.
SliceDataset generate_corpus(const PhantomSpec& spec);

enum class Split { train = 0, validation = 1, test = 2 };
std::string to_string(Split s);
Split parse_split(const std::string& name);

struct SplitOptions {
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  /// Number of tumor-area quantile strata; 0 picks clamp(studies / 20, 1, 10).
  int strata = 0;
};

struct SplitAssignment {
  std::map<std::string, Split> by_study;
  std::vector<std::string> warnings;

  std::vector<std::size_t> records_in(Split split, std::span<const StudyRecord> records) const;
  std::size_t study_count(Split split) const;
};

SplitAssignment split_dataset(std::span<const StudyRecord> records, const SplitOptions& options, Rng& rng);

/// Epoch index over `indices`: records with a tumor appear `factor` times.
std::vector<std::size_t> oversample_tumor_slices(std::span<const StudyRecord> records,
                                                 std::span<const std::size_t> indices, int factor);

inline constexpr const char* kDatasetFormat = "slices-v1";

void save_dataset(const std::filesystem::path& root, const SliceDataset& dataset,
                  const std::optional<SplitAssignment>& splits = std::nullopt);
SliceDataset load_dataset(const std::filesystem::path& root);
/// Reads the split section of a manifest, if any.
std::optional<SplitAssignment> load_splits(const std::filesystem::path& root);
/// Rewrites the manifest with the given split section.
void save_splits(const std::filesystem::path& root, const SplitAssignment& splits);

}  // namespace dinp
