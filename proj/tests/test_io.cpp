#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "adn/container.hpp"
#include "adn/error.hpp"
#include "adn/volume.hpp"

namespace adn {
namespace {

namespace fs = std::filesystem;

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an adn::Error";
  return Errc::Io;
}

fs::path scratch(const char* name) {
  fs::path dir = fs::temp_directory_path() / "adn_io_tests";
  fs::create_directories(dir);
  return dir / name;
}

SynthConfig small_config(std::uint64_t seed = 1) {
  SynthConfig cfg;
  cfg.dims = {12, 32, 32};
  cfg.blobs = 5;
  cfg.radius_min = 2;
  cfg.radius_max = 4;
  cfg.seed = seed;
  return cfg;
}

TEST(Container, Crc32KnownValue) {
  const char* text = "123456789";
  EXPECT_EQ(crc32(std::span(reinterpret_cast<const std::uint8_t*>(text), 9)), 0xCBF43926u);
}

TEST(Container, LayoutAndErrors) {
  const std::uint8_t payload[] = {1, 2, 3};
  Bytes b = write_container("ADNTEST1", {{"k", 1}}, payload);
  ASSERT_GE(b.size(), 8u + 4 + 4 + 3);
  EXPECT_EQ(std::memcmp(b.data(), "ADNTEST1", 8), 0);
  ContainerView v = read_container(b, "ADNTEST1", ChecksumPolicy::Early, "test");
  EXPECT_TRUE(v.checksum_ok);
  EXPECT_EQ(v.header.at("k"), 1);
  ASSERT_EQ(v.payload.size(), 3u);
  EXPECT_EQ(v.payload[2], 3);
  EXPECT_EQ(code_of([&] { read_container(b, "ADNOTHER", ChecksumPolicy::Early, "test"); }), Errc::BadMagic);
  Bytes bad = b;
  bad[bad.size() - 5] ^= 1;
  EXPECT_EQ(code_of([&] { read_container(bad, "ADNTEST1", ChecksumPolicy::Early, "test"); }), Errc::Checksum);
  EXPECT_FALSE(read_container(bad, "ADNTEST1", ChecksumPolicy::Deferred, "test").checksum_ok);
}

TEST(VolumeFile, RoundTripBothStorageTypes) {
  SynthDataset d = synth_dataset(small_config());
  Volume back = decode_volume(encode_volume(d.volume));
  EXPECT_EQ(back.dims(), d.volume.dims());
  EXPECT_EQ(back.volume_id(), d.volume.volume_id());
  EXPECT_TRUE(std::equal(back.values().begin(), back.values().end(), d.volume.values().begin()));

  std::vector<float> levels(d.volume.dims().voxels());
  for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = static_cast<float>(i % 256) / 255.0f;
  Volume u8(d.volume.dims(), levels, VoxelType::U8, VoxelSize{4, 4, 40});
  fs::path path = scratch("u8.adnvol");
  save_volume(u8, path);
  Volume loaded = load_volume(path);
  EXPECT_EQ(loaded.dtype(), VoxelType::U8);
  EXPECT_EQ(loaded.voxel_size(), (VoxelSize{4, 4, 40}));
  for (std::size_t i = 0; i < levels.size(); ++i) EXPECT_EQ(loaded.values()[i], levels[i]);
}

TEST(VolumeFile, TruncatedPayloadIsSizeMismatch) {
  SynthDataset d = synth_dataset(small_config());
  Bytes bytes = encode_volume(d.volume);
  ContainerView v = read_container(bytes, "ADNVOL01", ChecksumPolicy::Early, "volume");
  Bytes short_payload(v.payload.begin(), v.payload.end() - 4);
  Bytes rewritten = write_container("ADNVOL01", v.header, short_payload);
  EXPECT_EQ(code_of([&] { decode_volume(rewritten); }), Errc::SizeMismatch);
  Bytes cut(bytes.begin(), bytes.end() - 1);
  EXPECT_NE(code_of([&] { decode_volume(cut); }), Errc::Io);
}

TEST(VolumeFile, OutOfRangeIntensityIsRejected) {
  Volume v({1, 1, 2}, {0.5f, 1.5f});
  EXPECT_EQ(code_of([&] { decode_volume(encode_volume(v)); }), Errc::Corrupt);
}

TEST(LabelFile, RoundTripAndValidation) {
  SynthDataset d = synth_dataset(small_config());
  fs::path path = scratch("labels.adnlab");
  save_labels(d.labels, path);
  LabelVolume back = load_labels(path, d.volume);
  EXPECT_TRUE(std::equal(back.mask().begin(), back.mask().end(), d.labels.mask().begin()));
  EXPECT_EQ(back.volume_id(), d.volume.volume_id());

  EXPECT_EQ(code_of([] { LabelVolume({1, 1, 3}, {0, 2, 1}); }), Errc::NonBinaryLabel);
  // Value 2 smuggled into a well-formed container.
  Bytes bytes = encode_labels(d.labels);
  ContainerView v = read_container(bytes, "ADNLAB01", ChecksumPolicy::Early, "labels");
  Bytes payload(v.payload.begin(), v.payload.end());
  payload[0] = 2;
  EXPECT_EQ(code_of([&] { decode_labels(write_container("ADNLAB01", v.header, payload)); }), Errc::NonBinaryLabel);

  Volume other = crop_slices(d.volume, {0, 6});
  EXPECT_EQ(code_of([&] { load_labels(path, other); }), Errc::GridMismatch);
}

TEST(Synth, ZeroBlobsGiveEmptyLabels) {
  SynthConfig cfg = small_config();
  cfg.blobs = 0;
  SynthDataset d = synth_dataset(cfg);
  EXPECT_EQ(d.labels.positives(), 0u);
  for (float v : d.volume.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Synth, SeedDeterminesData) {
  SynthDataset a = synth_dataset(small_config(5)), b = synth_dataset(small_config(5));
  SynthDataset c = synth_dataset(small_config(6));
  EXPECT_EQ(a.volume.volume_id(), b.volume.volume_id());
  EXPECT_TRUE(std::equal(a.labels.mask().begin(), a.labels.mask().end(), b.labels.mask().begin()));
  EXPECT_NE(a.volume.volume_id(), c.volume.volume_id());
  EXPECT_EQ(a.labels.volume_id(), a.volume.volume_id());
}

TEST(Synth, DefaultPositiveFraction) {
  SynthDataset d = synth_dataset(SynthConfig{});
  const double frac = double(d.labels.positives()) / double(d.labels.dims().voxels());
  EXPECT_GE(frac, 0.005);
  EXPECT_LE(frac, 0.05);
}

TEST(Synth, BlobsAreBrighterThanBackground) {
  SynthDataset d = synth_dataset(small_config());
  double fg = 0, bg = 0;
  std::size_t nf = 0, nb = 0;
  for (std::size_t i = 0; i < d.volume.values().size(); ++i) {
    (d.labels.mask()[i] ? fg : bg) += d.volume.values()[i];
    (d.labels.mask()[i] ? nf : nb) += 1;
  }
  EXPECT_NEAR(fg / nf, 0.8, 0.05);
  EXPECT_NEAR(bg / nb, 0.2, 0.05);
}

TEST(Manifest, RoundTripAndOverlap) {
  SynthDataset d = synth_dataset(small_config());
  fs::path vol = scratch("m.adnvol"), lab = scratch("m.adnlab");
  save_volume(d.volume, vol);
  save_labels(d.labels, lab);
  SplitManifest m;
  m.entries["train"] = {vol.filename(), lab.filename(), {0, 6}};
  m.entries["val"] = {vol.filename(), lab.filename(), {6, 8}};
  m.entries["test"] = {vol.filename(), lab.filename(), {8, 12}};
  fs::path path = scratch("manifest.json");
  save_manifest(m, path);
  SplitManifest back = load_manifest(path);
  EXPECT_EQ(back.at("val").slices, (SliceRange{6, 8}));
  EXPECT_EQ(back.at("test").volume, vol);
  EXPECT_THROW(back.at("holdout"), Error);

  m.entries["val"].slices = {5, 8};
  EXPECT_THROW(m.validate(), Error);
  save_manifest(m, path);
  EXPECT_THROW(load_manifest(path), Error);
  // Same ranges on different volumes are fine.
  m.entries["val"].volume = "another.adnvol";
  EXPECT_NO_THROW(m.validate());
}

TEST(Volume, CropSlices) {
  SynthDataset d = synth_dataset(small_config());
  Volume part = crop_slices(d.volume, {3, 7});
  EXPECT_EQ(part.dims(), (Dims{4, 32, 32}));
  EXPECT_TRUE(std::equal(part.slice(0).begin(), part.slice(0).end(), d.volume.slice(3).begin()));
  LabelVolume lp = crop_slices(d.labels, {3, 7});
  EXPECT_EQ(lp.at(1, 5, 5), d.labels.at(4, 5, 5));
  EXPECT_THROW(crop_slices(d.volume, {7, 13}), Error);
  Tensor stack = d.volume.slice_stack(2, 3);
  EXPECT_EQ(stack.shape(), (Shape{3, 32, 32}));
  EXPECT_EQ(stack(2, 4, 5), d.volume.slice(4)[4 * 32 + 5]);
}

}  // namespace
}  // namespace adn
