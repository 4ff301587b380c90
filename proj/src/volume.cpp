#include "adn/volume.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "adn/error.hpp"

namespace adn {
namespace {

constexpr std::string_view kVolumeMagic = "ADNVOL01";
constexpr std::string_view kLabelMagic = "ADNLAB01";

std::string dims_string(const Dims& d) {
  return std::to_string(d.depth) + "x" + std::to_string(d.height) + "x" +
         std::to_string(d.width);
}

Dims dims_from_json(const nlohmann::json& j) {
  auto v = j.get<std::vector<std::size_t>>();
  if (v.size() != 3) fail(Errc::Corrupt, "dims must have three entries");
  return Dims{v[0], v[1], v[2]};
}

nlohmann::json dims_to_json(const Dims& d) { return {d.depth, d.height, d.width}; }

std::uint8_t to_u8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

template <typename F>
auto header_field(F&& f, const char* what) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::Corrupt, std::string(what) + ": malformed header: " + e.what());
  }
}

}  // namespace

Volume::Volume(Dims dims, std::vector<float> intensities, VoxelType dtype,
               VoxelSize voxel_size)
    : dims_(dims), data_(std::move(intensities)), dtype_(dtype), voxel_size_(voxel_size) {
  if (data_.size() != dims_.voxels()) {
    fail(Errc::SizeMismatch, "volume " + dims_string(dims_) + " needs " +
                                 std::to_string(dims_.voxels()) + " voxels, got " +
                                 std::to_string(data_.size()));
  }
  Bytes id_bytes;
  append_f32_le(id_bytes, data_);
  for (std::size_t v : {dims_.depth, dims_.height, dims_.width}) {
    for (int b = 0; b < 8; ++b) id_bytes.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  volume_id_ = content_hash(id_bytes);
}

std::span<const float> Volume::slice(std::size_t z) const {
  if (z >= dims_.depth) fail(Errc::InvalidArgument, "slice index out of range");
  return std::span<const float>(data_).subspan(z * dims_.plane(), dims_.plane());
}

Tensor Volume::slice_stack(std::size_t z, std::size_t channels) const {
  if (channels == 0 || z + channels > dims_.depth) {
    fail(Errc::ShapeMismatch, "volume too thin for a " + std::to_string(channels) +
                                  "-slice stack at z=" + std::to_string(z));
  }
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(z * dims_.plane());
  return Tensor({channels, dims_.height, dims_.width},
                std::vector<float>(first, first + static_cast<std::ptrdiff_t>(
                                                      channels * dims_.plane())));
}

LabelVolume::LabelVolume(Dims dims, std::vector<std::uint8_t> mask, std::string volume_id)
    : dims_(dims), mask_(std::move(mask)), volume_id_(std::move(volume_id)) {
  if (mask_.size() != dims_.voxels()) {
    fail(Errc::SizeMismatch, "label volume " + dims_string(dims_) + " needs " +
                                 std::to_string(dims_.voxels()) + " voxels, got " +
                                 std::to_string(mask_.size()));
  }
  for (std::uint8_t v : mask_) {
    if (v > 1) fail(Errc::NonBinaryLabel, "label value " + std::to_string(v) + " is not 0 or 1");
  }
}

std::size_t LabelVolume::positives() const noexcept {
  return static_cast<std::size_t>(std::count(mask_.begin(), mask_.end(), std::uint8_t{1}));
}

Bytes encode_volume(const Volume& volume) {
  nlohmann::json header;
  header["dims"] = dims_to_json(volume.dims());
  header["dtype"] = volume.dtype() == VoxelType::U8 ? "u8" : "f32";
  const auto& vs = volume.voxel_size();
  header["voxel_size_nm"] = {vs.x, vs.y, vs.z};
  header["volume_id"] = volume.volume_id();
  Bytes payload;
  if (volume.dtype() == VoxelType::U8) {
    payload.reserve(volume.values().size());
    for (float v : volume.values()) payload.push_back(to_u8(v));
  } else {
    append_f32_le(payload, volume.values());
  }
  return write_container(kVolumeMagic, header, payload);
}

Volume decode_volume(std::span<const std::uint8_t> bytes) {
  ContainerView view = read_container(bytes, kVolumeMagic, ChecksumPolicy::Deferred, "volume file");
  auto [dims, dtype, voxel_size] = header_field(
      [&] {
        Dims d = dims_from_json(view.header.at("dims"));
        const std::string t = view.header.at("dtype").get<std::string>();
        if (t != "u8" && t != "f32") fail(Errc::Corrupt, "volume file: unknown dtype " + t);
        VoxelSize vs;
        if (view.header.contains("voxel_size_nm")) {
          auto v = view.header.at("voxel_size_nm").get<std::vector<double>>();
          if (v.size() != 3) fail(Errc::Corrupt, "voxel_size_nm must have three entries");
          vs = VoxelSize{v[0], v[1], v[2]};
        }
        return std::make_tuple(d, t == "u8" ? VoxelType::U8 : VoxelType::F32, vs);
      },
      "volume file");
  const std::size_t width = dtype == VoxelType::U8 ? 1 : 4;
  if (view.payload.size() != dims.voxels() * width) {
    fail(Errc::SizeMismatch, "volume file: payload has " + std::to_string(view.payload.size()) +
                                 " bytes, dims " + dims_string(dims) + " need " +
                                 std::to_string(dims.voxels() * width));
  }
  if (!view.checksum_ok) fail(Errc::Checksum, "volume file: CRC32 mismatch");
  std::vector<float> values;
  if (dtype == VoxelType::U8) {
    values.reserve(dims.voxels());
    for (std::uint8_t b : view.payload) values.push_back(static_cast<float>(b) / 255.0f);
  } else {
    values = decode_f32_le(view.payload);
    for (float v : values) {
      if (!(v >= 0.0f && v <= 1.0f)) {
        fail(Errc::Corrupt, "volume file: f32 intensities must lie in [0,1]");
      }
    }
  }
  return Volume(dims, std::move(values), dtype, voxel_size);
}

Bytes encode_labels(const LabelVolume& labels) {
  nlohmann::json header;
  header["dims"] = dims_to_json(labels.dims());
  header["dtype"] = "u8";
  header["volume_id"] = labels.volume_id();
  return write_container(kLabelMagic, header, labels.mask());
}

LabelVolume decode_labels(std::span<const std::uint8_t> bytes) {
  ContainerView view = read_container(bytes, kLabelMagic, ChecksumPolicy::Deferred, "label file");
  auto [dims, id] = header_field(
      [&] {
        return std::make_pair(dims_from_json(view.header.at("dims")),
                              view.header.value("volume_id", std::string()));
      },
      "label file");
  if (view.payload.size() != dims.voxels()) {
    fail(Errc::SizeMismatch, "label file: payload has " + std::to_string(view.payload.size()) +
                                 " bytes, dims " + dims_string(dims) + " need " +
                                 std::to_string(dims.voxels()));
  }
  if (!view.checksum_ok) fail(Errc::Checksum, "label file: CRC32 mismatch");
  return LabelVolume(dims, std::vector<std::uint8_t>(view.payload.begin(), view.payload.end()), id);
}

void save_volume(const Volume& volume, const std::filesystem::path& path) {
  write_file(path, encode_volume(volume));
}

Volume load_volume(const std::filesystem::path& path) { return decode_volume(read_file(path)); }

void save_labels(const LabelVolume& labels, const std::filesystem::path& path) {
  write_file(path, encode_labels(labels));
}

LabelVolume load_labels(const std::filesystem::path& path) {
  return decode_labels(read_file(path));
}

LabelVolume load_labels(const std::filesystem::path& path, const Volume& volume) {
  LabelVolume labels = load_labels(path);
  if (labels.dims() != volume.dims()) {
    fail(Errc::GridMismatch, "label dims " + dims_string(labels.dims()) +
                                 " do not match volume dims " + dims_string(volume.dims()));
  }
  return labels;
}

const SplitEntry& SplitManifest::at(const std::string& name) const {
  auto it = entries.find(name);
  if (it == entries.end()) fail(Errc::InvalidArgument, "split manifest has no \"" + name + "\" entry");
  return it->second;
}

void SplitManifest::validate() const {
  for (auto a = entries.begin(); a != entries.end(); ++a) {
    if (a->second.slices.end <= a->second.slices.begin) {
      fail(Errc::InvalidArgument, "split \"" + a->first + "\" has an empty slice range");
    }
    for (auto b = std::next(a); b != entries.end(); ++b) {
      if (std::filesystem::weakly_canonical(a->second.volume) ==
              std::filesystem::weakly_canonical(b->second.volume) &&
          a->second.slices.overlaps(b->second.slices)) {
        fail(Errc::InvalidArgument, "splits \"" + a->first + "\" and \"" + b->first +
                                        "\" overlap in slices of " + a->second.volume.string());
      }
    }
  }
}

SplitManifest load_manifest(const std::filesystem::path& path) {
  Bytes bytes = read_file(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object()) fail(Errc::Corrupt, path.string() + ": not a JSON object");
  const auto base = path.parent_path();
  SplitManifest m;
  try {
    for (auto& [name, e] : j.items()) {
      auto range = e.at("slices").get<std::vector<std::size_t>>();
      if (range.size() != 2) fail(Errc::Corrupt, "slices must be [begin, end)");
      m.entries[name] = SplitEntry{base / e.at("volume").get<std::string>(),
                                   base / e.at("labels").get<std::string>(),
                                   SliceRange{range[0], range[1]}};
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::Corrupt, path.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

void save_manifest(const SplitManifest& manifest, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, e] : manifest.entries) {
    j[name] = {{"volume", e.volume.string()},
               {"labels", e.labels.string()},
               {"slices", {e.slices.begin, e.slices.end}}};
  }
  const std::string text = j.dump(2) + "\n";
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Volume crop_slices(const Volume& volume, SliceRange range) {
  if (range.end > volume.dims().depth || range.begin >= range.end) {
    fail(Errc::InvalidArgument, "slice range out of bounds");
  }
  const std::size_t plane = volume.dims().plane();
  auto first = volume.values().begin() + static_cast<std::ptrdiff_t>(range.begin * plane);
  std::vector<float> data(first, first + static_cast<std::ptrdiff_t>(range.size() * plane));
  return Volume(Dims{range.size(), volume.dims().height, volume.dims().width}, std::move(data),
                volume.dtype(), volume.voxel_size());
}

LabelVolume crop_slices(const LabelVolume& labels, SliceRange range) {
  if (range.end > labels.dims().depth || range.begin >= range.end) {
    fail(Errc::InvalidArgument, "slice range out of bounds");
  }
  const std::size_t plane = labels.dims().plane();
  auto first = labels.mask().begin() + static_cast<std::ptrdiff_t>(range.begin * plane);
  std::vector<std::uint8_t> mask(first, first + static_cast<std::ptrdiff_t>(range.size() * plane));
  return LabelVolume(Dims{range.size(), labels.dims().height, labels.dims().width},
                     std::move(mask), labels.volume_id());
}

SynthDataset synth_dataset(const SynthConfig& config) {
  const Dims d = config.dims;
  if (d.voxels() == 0) fail(Errc::InvalidArgument, "synthetic volume has zero extent");
  if (config.radius_min <= 0 || config.radius_max < config.radius_min) {
    fail(Errc::InvalidArgument, "radius range must satisfy 0 < min <= max");
  }
  std::mt19937_64 rng(config.seed);

  struct Blob {
    double cz, cy, cx, rz, ry, rx;
  };
  std::vector<Blob> blobs;
  std::uniform_real_distribution<double> radius(config.radius_min, config.radius_max);
  constexpr int kAttempts = 1000;
  // Blobs keep a two-voxel gap so that they never merge under 26-connectivity.
  constexpr double kGap = 2.0;
  for (std::size_t b = 0; b < config.blobs; ++b) {
    bool placed = false;
    for (int attempt = 0; attempt < kAttempts && !placed; ++attempt) {
      Blob blob{0, 0, 0, radius(rng), radius(rng), radius(rng)};
      auto centre = [&](double r, std::size_t extent) {
        if (2 * r + 1 > static_cast<double>(extent)) return -1.0;
        std::uniform_real_distribution<double> u(r, static_cast<double>(extent) - 1 - r);
        return u(rng);
      };
      blob.cz = centre(blob.rz, d.depth);
      blob.cy = centre(blob.ry, d.height);
      blob.cx = centre(blob.rx, d.width);
      if (blob.cz < 0 || blob.cy < 0 || blob.cx < 0) continue;
      const double reach = std::max({blob.rz, blob.ry, blob.rx});
      placed = std::none_of(blobs.begin(), blobs.end(), [&](const Blob& o) {
        const double other = std::max({o.rz, o.ry, o.rx});
        return std::hypot(blob.cz - o.cz, blob.cy - o.cy, blob.cx - o.cx) < reach + other + kGap;
      });
      if (placed) blobs.push_back(blob);
    }
    if (!placed) {
      fail(Errc::InvalidArgument, "could not place blob " + std::to_string(b + 1) + " of " +
                                      std::to_string(config.blobs) + " without overlap");
    }
  }

  std::vector<std::uint8_t> mask(d.voxels(), 0);
  for (const Blob& blob : blobs) {
    auto lo = [](double c, double r) { return static_cast<std::size_t>(std::max(0.0, std::floor(c - r))); };
    auto hi = [](double c, double r, std::size_t n) {
      return std::min(n - 1, static_cast<std::size_t>(std::ceil(c + r)));
    };
    for (std::size_t z = lo(blob.cz, blob.rz); z <= hi(blob.cz, blob.rz, d.depth); ++z) {
      for (std::size_t y = lo(blob.cy, blob.ry); y <= hi(blob.cy, blob.ry, d.height); ++y) {
        for (std::size_t x = lo(blob.cx, blob.rx); x <= hi(blob.cx, blob.rx, d.width); ++x) {
          const double dz = (static_cast<double>(z) - blob.cz) / blob.rz;
          const double dy = (static_cast<double>(y) - blob.cy) / blob.ry;
          const double dx = (static_cast<double>(x) - blob.cx) / blob.rx;
          if (dz * dz + dy * dy + dx * dx <= 1.0) mask[(z * d.height + y) * d.width + x] = 1;
        }
      }
    }
  }

  std::normal_distribution<double> noise(0.0, config.noise);
  std::vector<float> values(d.voxels());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double base = mask[i] ? config.foreground : config.background;
    const double v = config.noise > 0 ? base + noise(rng) : base;
    values[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  Volume volume(d, std::move(values));
  LabelVolume labels(d, std::move(mask), volume.volume_id());
  return SynthDataset{std::move(volume), std::move(labels)};
}

}  // namespace adn
