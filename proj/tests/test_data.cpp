#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "fvit/core/errors.hpp"
#include "fvit/data/data.hpp"
#include "oracles.hpp"

using namespace fvit;
using namespace fvit::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "fvit_test_data";
  fs::create_directories(dir);
  return dir / name;
}

void dump(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

void be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(std::uint8_t(v >> s));
}

// Hand-built IDX pair: n images of rows x cols, pixel (i, p) = (7i + p) mod 256.
std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>> idx_bytes(std::uint32_t n, std::uint32_t rows,
                                                                         std::uint32_t cols) {
  std::vector<std::uint8_t> img, lab;
  be32(img, 0x803);
  be32(img, n);
  be32(img, rows);
  be32(img, cols);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t p = 0; p < rows * cols; ++p) img.push_back(std::uint8_t((7 * i + p) % 256));
  be32(lab, 0x801);
  be32(lab, n);
  for (std::uint32_t i = 0; i < n; ++i) lab.push_back(std::uint8_t(i % 10));
  return {img, lab};
}

}  // namespace

TEST_CASE("idx loading") {
  const auto [img, lab] = idx_bytes(3, 28, 28);
  const auto ip = scratch("a-images"), lp = scratch("a-labels");
  dump(ip, img);
  dump(lp, lab);
  const auto ds = load_idx(ip.string(), lp.string());
  CHECK(ds.images.shape() == Shape{3, 1, 28, 28});
  CHECK(ds.labels == std::vector<std::int32_t>{0, 1, 2});
  CHECK(ds.num_classes == 10);
  // N is derived from the file size: (bytes - 16) / 784.
  CHECK(ds.size() == (fs::file_size(ip) - 16) / 784);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 784; ++p) CHECK(ds.images[i * 784 + p] == float((7 * i + p) % 256) / 255.0f);
  const auto [lo, hi] = std::minmax_element(ds.images.vec().begin(), ds.images.vec().end());
  CHECK(*lo >= 0.0f);
  CHECK(*hi <= 1.0f);
  CHECK(load_idx(ip.string(), lp.string()).images.vec() == ds.images.vec());

  // write_idx reproduces the fixture byte for byte.
  const auto wi = scratch("b-images"), wl = scratch("b-labels");
  write_idx(ds, wi.string(), wl.string());
  CHECK(fs::file_size(wi) == img.size());
  const auto again = load_idx(wi.string(), wl.string());
  CHECK(again.images.vec() == ds.images.vec());
  CHECK(again.labels == ds.labels);
}

TEST_CASE("idx errors") {
  const auto [img, lab] = idx_bytes(4, 5, 5);
  const auto ip = scratch("e-images"), lp = scratch("e-labels");
  dump(lp, lab);

  auto bad = img;
  bad[3] = 0x01;
  dump(ip, bad);
  CHECK_THROWS_AS(load_idx(ip.string(), lp.string()), FormatError);
  dump(ip, img);
  CHECK_THROWS_AS(load_idx(lp.string(), ip.string()), FormatError);

  // Truncated pixel data.
  dump(ip, std::vector<std::uint8_t>(img.begin(), img.end() - 10));
  CHECK_THROWS_AS(load_idx(ip.string(), lp.string()), ConsistencyError);
  // Truncated labels.
  dump(ip, img);
  dump(lp, std::vector<std::uint8_t>(lab.begin(), lab.end() - 1));
  CHECK_THROWS_AS(load_idx(ip.string(), lp.string()), ConsistencyError);
  // Count mismatch.
  const auto [img3, lab3] = idx_bytes(3, 5, 5);
  dump(lp, lab3);
  CHECK_THROWS_AS(load_idx(ip.string(), lp.string()), ConsistencyError);

  CHECK_THROWS_AS(load_idx(scratch("missing").string(), lp.string()), FormatError);
}

TEST_CASE("cifar loading") {
  // Two records: label, then planar R, G, B.
  std::vector<std::uint8_t> bytes;
  for (std::uint8_t r = 0; r < 2; ++r) {
    bytes.push_back(std::uint8_t(3 + 5 * r));
    for (std::size_t p = 0; p < 3072; ++p) bytes.push_back(std::uint8_t((p * 13 + r * 101) % 256));
  }
  const auto path = scratch("batch.bin");
  dump(path, bytes);
  const auto ds = load_cifar10({path.string()});
  CHECK(ds.images.shape() == Shape{2, 3, 32, 32});
  CHECK(ds.labels == std::vector<std::int32_t>{3, 8});
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t p = 0; p < 3072; ++p) CHECK(ds.images[r * 3072 + p] == float((p * 13 + r * 101) % 256) / 255.0f);
  CHECK(ds.images.at(1, 2, 0, 0) == float((2048 * 13 + 101) % 256) / 255.0f);

  const auto two = load_cifar10({path.string(), path.string()});
  CHECK(two.size() == 4);
  CHECK(two.labels[2] == 3);

  const auto out = scratch("batch-out.bin");
  write_cifar10(ds, out.string());
  std::ifstream f(out, std::ios::binary);
  const std::vector<std::uint8_t> round((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  CHECK(round == bytes);

  const auto empty = load_cifar10({});
  CHECK(empty.size() == 0);
  CHECK(empty.num_classes == 10);
}

TEST_CASE("cifar errors") {
  std::vector<std::uint8_t> rec(3073, 0);
  rec[0] = 10;
  const auto path = scratch("bad.bin");
  dump(path, rec);
  CHECK_THROWS_AS(load_cifar10({path.string()}), FormatError);
  rec[0] = 9;
  rec.push_back(0);
  dump(path, rec);
  CHECK_THROWS_AS(load_cifar10({path.string()}), FormatError);
  CHECK_THROWS_AS(load_cifar10({scratch("absent.bin").string()}), FormatError);
}

TEST_CASE("augment") {
  Rng rng(31);
  const auto x = oracle::random<float>({6, 3, 8, 8}, rng, 0.0, 1.0);
  CHECK(augment(x, rng, {}).vec() == x.vec());
  CHECK(hflip(hflip(x)).vec() == x.vec());

  const auto f = hflip(x);
  for (std::size_t n = 0; n < 6; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) CHECK(f.at(n, c, i, j) == x.at(n, c, i, 7 - j));

  auto sorted = [](std::vector<float> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  const auto a = augment(x, rng, {true, false});
  CHECK(sorted(a.vec()) == sorted(x.vec()));
  // Each sample is either untouched or mirrored.
  for (std::size_t n = 0; n < 6; ++n) {
    bool same = true, mirrored = true;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
          same = same && a.at(n, c, i, j) == x.at(n, c, i, j);
          mirrored = mirrored && a.at(n, c, i, j) == x.at(n, c, i, 7 - j);
        }
    CHECK((same || mirrored));
  }

  Rng r1(9), r2(9);
  const auto c1 = augment(x, r1, {true, true}), c2 = augment(x, r2, {true, true});
  CHECK(c1.vec() == c2.vec());
  CHECK(c1.shape() == x.shape());

  // Crops of a reflect-padded image only contain values of that sample/channel.
  const auto crop = augment(x, rng, {false, true});
  for (std::size_t n = 0; n < 6; ++n)
    for (std::size_t c = 0; c < 3; ++c) {
      std::set<float> pool;
      for (std::size_t i = 0; i < 64; ++i) pool.insert(x[(n * 3 + c) * 64 + i]);
      for (std::size_t i = 0; i < 64; ++i) CHECK(pool.count(crop[(n * 3 + c) * 64 + i]) == 1);
    }

  // Flip rate is about one half.
  std::size_t heads = 0;
  Tensor<float> ramp({2000, 1, 1, 5});
  for (std::size_t n = 0; n < 2000; ++n)
    for (std::size_t j = 0; j < 5; ++j) ramp[n * 5 + j] = float(j);
  Rng big2(11);
  const auto flips = augment(ramp, big2, {true, false});
  for (std::size_t n = 0; n < 2000; ++n) heads += flips[n * 5] == 4.0f;
  CHECK(heads > 900);
  CHECK(heads < 1100);
}

TEST_CASE("normalize") {
  Rng rng(32);
  const auto x = oracle::random<float>({3, 2, 4, 4}, rng, 0.0, 1.0);
  CHECK(normalize(x, {0, 0}, {1, 1}).vec() == x.vec());
  const Tensor<float> c({1, 2, 3, 3}, std::vector<float>(18, 0.25f));
  const auto z = normalize(c, {0.25f, 0.25f}, {0.5f, 2.0f});
  for (float v : z.vec()) CHECK(v == 0.0f);
  const std::vector<float> mean{0.4f, 0.6f}, sd{0.2f, 0.3f};
  const auto n = normalize(x, mean, sd);
  CHECK(n.at(1, 1, 2, 3) == doctest::Approx((x.at(1, 1, 2, 3) - 0.6f) / 0.3f));
  CHECK(oracle::rel_err(denormalize(n, mean, sd), x, 1.0) <= 1e-6);
  CHECK_THROWS_AS(normalize(x, mean, {0.2f, 0.0f}), ParameterError);
  CHECK_THROWS_AS(normalize(x, {0.1f}, {1.0f}), DimensionError);
}

TEST_CASE("pad_to and subsets") {
  Rng rng(33);
  const auto x = oracle::random<float>({2, 1, 28, 28}, rng);
  const auto p = pad_to(x, 32);
  CHECK(p.shape() == Shape{2, 1, 32, 32});
  CHECK(p.at(1, 0, 0, 0) == 0.0f);
  CHECK(p.at(1, 0, 2, 2) == x.at(1, 0, 0, 0));
  CHECK(p.at(0, 0, 29, 29) == x.at(0, 0, 27, 27));
  CHECK_THROWS_AS(pad_to(x, 16), DimensionError);

  LabeledDataset ds{x, {4, 7}, 10};
  const auto g = gather(ds, {1, 1, 0});
  CHECK(g.labels == std::vector<std::int32_t>{7, 7, 4});
  CHECK(g.images.at(2, 0, 5, 5) == x.at(0, 0, 5, 5));
  CHECK(subset(ds, 1, 1).labels == std::vector<std::int32_t>{7});
  CHECK_THROWS_AS(subset(ds, 1, 2), UsageError);
  ds.labels[0] = 10;
  CHECK_THROWS_AS(ds.validate(), ConsistencyError);
}

TEST_CASE("permutation") {
  for (std::size_t n : {0u, 1u, 17u, 1000u}) {
    Rng rng(n);
    auto p = permutation(n, rng);
    CHECK(p.size() == n);
    std::sort(p.begin(), p.end());
    for (std::size_t i = 0; i < n; ++i) CHECK(p[i] == i);
  }
  Rng a(3), b(3);
  CHECK(permutation(50, a) == permutation(50, b));
}
