#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "adn/container.hpp"
#include "adn/tensor.hpp"

namespace adn {

enum class VoxelType { U8, F32 };

// Physical voxel extent in nanometres; the reference EM data is 3 x 3 x 30.
struct VoxelSize {
  double x = 3.0, y = 3.0, z = 30.0;
  bool operator==(const VoxelSize&) const = default;
};

struct Dims {
  std::size_t depth = 0, height = 0, width = 0;
  std::size_t voxels() const noexcept { return depth * height * width; }
  std::size_t plane() const noexcept { return height * width; }
  bool operator==(const Dims&) const = default;
};

// Intensity stack normalized to [0, 1]. `dtype` records the on-disk storage.
class Volume {
 public:
  Volume(Dims dims, std::vector<float> intensities, VoxelType dtype = VoxelType::F32,
         VoxelSize voxel_size = {});

  const Dims& dims() const noexcept { return dims_; }
  VoxelType dtype() const noexcept { return dtype_; }
  const VoxelSize& voxel_size() const noexcept { return voxel_size_; }
  const std::string& volume_id() const noexcept { return volume_id_; }
  std::span<const float> values() const noexcept { return data_; }
  std::span<const float> slice(std::size_t z) const;

  // [channels, H, W] tensor built from `channels` consecutive slices starting at z.
  Tensor slice_stack(std::size_t z, std::size_t channels) const;

 private:
  Dims dims_;
  std::vector<float> data_;
  VoxelType dtype_;
  VoxelSize voxel_size_;
  std::string volume_id_;
};

// Binary synapse annotation aligned to a Volume.
class LabelVolume {
 public:
  LabelVolume(Dims dims, std::vector<std::uint8_t> mask, std::string volume_id = {});

  const Dims& dims() const noexcept { return dims_; }
  const std::string& volume_id() const noexcept { return volume_id_; }
  std::span<const std::uint8_t> mask() const noexcept { return mask_; }
  std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const {
    return mask_[(z * dims_.height + y) * dims_.width + x];
  }
  std::size_t positives() const noexcept;

 private:
  Dims dims_;
  std::vector<std::uint8_t> mask_;
  std::string volume_id_;
};

// "ADNVOL01" / "ADNLAB01" containers.
Bytes encode_volume(const Volume& volume);
Volume decode_volume(std::span<const std::uint8_t> bytes);
Bytes encode_labels(const LabelVolume& labels);
LabelVolume decode_labels(std::span<const std::uint8_t> bytes);

void save_volume(const Volume& volume, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);
void save_labels(const LabelVolume& labels, const std::filesystem::path& path);
LabelVolume load_labels(const std::filesystem::path& path);
// Loads labels and checks their grid against `volume`.
LabelVolume load_labels(const std::filesystem::path& path, const Volume& volume);

// Half-open slice interval [begin, end).
struct SliceRange {
  std::size_t begin = 0, end = 0;
  std::size_t size() const noexcept { return end - begin; }
  bool overlaps(const SliceRange& o) const noexcept {
    return begin < o.end && o.begin < end;
  }
  bool operator==(const SliceRange&) const = default;
};

struct SplitEntry {
  std::filesystem::path volume;
  std::filesystem::path labels;
  SliceRange slices;
};

// Train / validation / test partition. Entries drawn from the same volume file
// must have disjoint slice ranges.
struct SplitManifest {
  std::map<std::string, SplitEntry> entries;

  const SplitEntry& at(const std::string& name) const;
  void validate() const;
};

// Reference split shape of the published EM benchmark (slices per split).
inline constexpr std::array<std::size_t, 3> kReferenceSplitSlices{75, 25, 100};

SplitManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const SplitManifest& manifest, const std::filesystem::path& path);

// Copies slices [range.begin, range.end) into standalone volumes.
Volume crop_slices(const Volume& volume, SliceRange range);
LabelVolume crop_slices(const LabelVolume& labels, SliceRange range);

struct SynthConfig {
  Dims dims{64, 128, 128};
  std::size_t blobs = 20;
  double radius_min = 3.0;
  double radius_max = 6.0;
  double noise = 0.05;
  double background = 0.2;
  double foreground = 0.8;
  std::uint64_t seed = 1;
};

struct SynthDataset {
  Volume volume;
  LabelVolume labels;
};

// Dark noisy background with bright, non-touching ellipsoidal blobs; the
// labels mark blob voxels exactly.
SynthDataset synth_dataset(const SynthConfig& config);

}  // namespace adn
