// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mmae/checkpoint.hpp"
#include "mmae/dataset.hpp"
#include "mmae/stain.hpp"
#include "mmae/synth.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

namespace fs = std::filesystem;
using namespace mmae;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("mmae_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

std::vector<char> read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double angle_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  double c = a.normalized().dot(b.normalized());
  return std::acos(std::min(1.0, std::max(-1.0, c))) * 180.0 / M_PI;
}

}  // namespace

TEST_CASE("generator determinism") {
  SynthSpec spec;
  spec.per_class = 2;
  spec.seed = 99;
  Dataset a = synth_generate(spec);
  Dataset b = synth_generate(spec);
  REQUIRE(a.items.size() == b.items.size());
  for (size_t i = 0; i < a.items.size(); ++i) {
    CHECK(a.items[i].images.rgb.pixels == b.items[i].images.rgb.pixels);
    CHECK(a.items[i].images.h_channel.pixels == b.items[i].images.h_channel.pixels);
    CHECK(a.items[i].nucleus_count == b.items[i].nucleus_count);
  }
}

TEST_CASE("blank tissue renders a constant image with the exact wash color") {
  SynthSpec spec;
  spec.num_classes = 1;
  spec.per_class = 1;
  spec.noise_std = 0.0;
  ClassSpec blank;
  blank.name = "blank";
  blank.density_min = blank.density_max = 0.0;
  blank.wash_hema_min = blank.wash_hema_max = 0.2;
  blank.wash_eosin_min = blank.wash_eosin_max = 0.3;
  spec.classes = {blank};

  Dataset ds = synth_generate(spec);
  const ImageU8& rgb = ds.items[0].images.rgb;
  Eigen::Vector3d od = spec.w_true * Eigen::Vector2d(0.2, 0.3);
  for (int c = 0; c < 3; ++c) {
    const std::uint8_t expected = quantize_u8(255.0 * std::exp(-od(c)));
    for (int y = 0; y < rgb.height; ++y) {
      for (int x = 0; x < rgb.width; ++x) {
        CHECK(rgb.at(x, y, c) == expected);
      }
    }
  }
}

TEST_CASE("noise-free optical density matches W* H* within quantization") {
  SynthSpec spec;
  spec.per_class = 2;
  spec.noise_std = 0.0;
  spec.seed = 4;
  Dataset ds = synth_generate(spec);
  for (const DataItem& item : ds.items) {
    OpticalDensity od = to_optical_density(item.images.rgb);
    Eigen::Matrix3Xd truth = spec.w_true * item.concentrations;
    for (Eigen::Index p = 0; p < od.v.cols(); ++p) {
      for (int c = 0; c < 3; ++c) {
        const double intensity = 255.0 * std::exp(-truth(c, p));
        const double bound = 0.5 / std::max(intensity - 0.5, 0.5) + 1e-12;
        CHECK(std::abs(od.v(c, p) - truth(c, p)) <= bound);
      }
    }
  }
}

TEST_CASE("snmf recovers the generator's stain matrix from rendered images") {
  SynthSpec spec;
  spec.per_class = 1;
  spec.num_classes = 2;  // dense_small and sparse_large carry both stains
  spec.seed = 17;
  Dataset ds = synth_generate(spec);
  for (const DataItem& item : ds.items) {
    SnmfOptions opts;
    opts.seed = 1;
    SnmfResult fit = snmf_fit(to_optical_density(item.images.rgb), opts);
    CHECK(angle_deg(fit.model.w.col(0), spec.w_true.col(0)) < 5.0);
    CHECK(angle_deg(fit.model.w.col(1), spec.w_true.col(1)) < 5.0);
  }
}

TEST_CASE("disjoint density ranges separate perfectly on the nucleus count") {
  SynthSpec spec;
  spec.num_classes = 2;
  spec.per_class = 50;
  spec.seed = 23;
  Dataset ds = synth_generate(spec);  // dense_small: >= 10/kpx, sparse_large: <= 4/kpx
  const double threshold = 7.0 * spec.image_size * spec.image_size / 1000.0;
  int correct = 0;
  for (const DataItem& item : ds.items) {
    int predicted = item.nucleus_count > threshold ? 0 : 1;
    if (predicted == item.label) ++correct;
  }
  CHECK(correct == 100);
}

TEST_CASE("stratified split") {
  SynthSpec spec;
  spec.num_classes = 2;
  spec.per_class = 10;
  spec.image_size = 8;
  Dataset ds = synth_generate(spec);

  auto [train, test] = split_dataset(ds, 0.5, 3);
  CHECK(train.items.size() == 10);
  CHECK(test.items.size() == 10);
  for (int label = 0; label < 2; ++label) {
    auto count = [&](const Dataset& d) {
      int n = 0;
      for (const auto& item : d.items) n += item.label == label;
      return n;
    };
    CHECK(count(train) == 5);
    CHECK(count(test) == 5);
  }

  SUBCASE("proportions preserved within one item") {
    SynthSpec odd = spec;
    odd.per_class = 7;
    Dataset ds7 = synth_generate(odd);
    auto [tr, te] = split_dataset(ds7, 0.6, 1);
    for (int label = 0; label < 2; ++label) {
      int n = 0;
      for (const auto& item : tr.items) n += item.label == label;
      CHECK(std::abs(n - 0.6 * 7) <= 1.0);
    }
    CHECK(tr.items.size() + te.items.size() == ds7.items.size());
  }

  SUBCASE("split determinism") {
    auto [a1, b1] = split_dataset(ds, 0.5, 44);
    auto [a2, b2] = split_dataset(ds, 0.5, 44);
    REQUIRE(a1.items.size() == a2.items.size());
    for (size_t i = 0; i < a1.items.size(); ++i) {
      CHECK(a1.items[i].images.rgb.pixels == a2.items[i].images.rgb.pixels);
    }
  }

  SUBCASE("tiny class is a stratification error") {
    Dataset tiny;
    tiny.class_names = {"a", "b"};
    tiny.items.resize(3);
    tiny.items[0].label = 0;
    tiny.items[1].label = 0;
    tiny.items[2].label = 1;
    CHECK_THROWS_AS(split_dataset(tiny, 0.5, 1), ContractError);
  }

  SUBCASE("bad fraction") {
    CHECK_THROWS_AS(split_dataset(ds, 0.0, 1), ContractError);
    CHECK_THROWS_AS(split_dataset(ds, 1.0, 1), ContractError);
  }
}

TEST_CASE("png and dataset roundtrip") {
  TempDir tmp;
  SynthSpec spec;
  spec.num_classes = 2;
  spec.per_class = 3;
  spec.image_size = 16;
  spec.seed = 5;
  Dataset ds = synth_generate(spec);

  SUBCASE("single image png roundtrip") {
    const std::string p = (tmp.path / "img.png").string();
    write_png(p, ds.items[0].images.rgb);
    ImageU8 back = read_png(p);
    CHECK(back.width == 16);
    CHECK(back.pixels == ds.items[0].images.rgb.pixels);
  }

  SUBCASE("dataset write then load preserves pixels, labels and splits") {
    auto [train, test] = split_dataset(ds, 0.5, 7);
    write_dataset(tmp.path.string(), train, false);
    write_dataset(tmp.path.string(), test, true);

    Dataset train_back = load_dataset(tmp.path.string(), "train");
    Dataset test_back = load_dataset(tmp.path.string(), "test");
    CHECK(train_back.items.size() == train.items.size());
    CHECK(test_back.items.size() == test.items.size());
    // write_dataset groups by class; compare as label-sorted pixel multisets.
    auto key = [](const DataItem& it) { return std::make_pair(it.label, it.images.rgb.pixels); };
    std::multiset<std::pair<int, std::vector<std::uint8_t>>> want, got;
    for (const auto& it : train.items) want.insert(key(it));
    for (const auto& it : train_back.items) got.insert(key(it));
    CHECK(want == got);
    for (const auto& it : train_back.items) {
      CHECK(it.images.h_channel.num_pixels() == 256);  // siblings loaded
    }
    CHECK(train_back.class_names == ds.class_names);
  }

  SUBCASE("missing manifest is an io error") {
    CHECK_THROWS_AS(load_dataset((tmp.path / "nope").string()), IoError);
  }
}

TEST_CASE("checkpoint roundtrip and format arithmetic") {
  TempDir tmp;
  const std::string path = (tmp.path / "model.ckpt").string();

  Checkpoint ckpt;
  ckpt.seed = 42;
  ckpt.step = 1000;
  ckpt.epoch = 10;
  ckpt.config = "lr = 0.001\n";
  RowMat m(2, 2);
  m << 1.5, -2.5, 3.5, 4.5;
  ckpt.tensors.emplace_back("t", Tensor::from_matrix(m));
  save_checkpoint(path, ckpt);

  SUBCASE("size formula for a single 2x2 tensor") {
    Checkpoint small;
    small.config = "";
    small.tensors.emplace_back("t", Tensor::from_matrix(m));
    const std::string p2 = (tmp.path / "small.ckpt").string();
    save_checkpoint(p2, small);
    const auto header = 5 + 4 + 8 + 8 + 8 + 8 + 0 + 8;
    const auto record = (8 + 1) + 8 + 2 * 8 + 4 * 8;
    CHECK(fs::file_size(p2) == static_cast<std::uintmax_t>(header + record));
  }

  SUBCASE("load restores every field bit-exactly") {
    Checkpoint back = load_checkpoint(path);
    CHECK(back.seed == 42);
    CHECK(back.step == 1000);
    CHECK(back.epoch == 10);
    CHECK(back.config == "lr = 0.001\n");
    REQUIRE(back.tensors.size() == 1);
    CHECK(back.tensors[0].first == "t");
    CHECK(back.tensors[0].second.shape() == std::vector<int>({2, 2}));
    CHECK((back.tensors[0].second.value() - ckpt.tensors[0].second.value()).cwiseAbs().maxCoeff() ==
          0.0);
  }

  SUBCASE("save-load-save produces byte-identical files") {
    Checkpoint back = load_checkpoint(path);
    const std::string p2 = (tmp.path / "again.ckpt").string();
    save_checkpoint(p2, back);
    CHECK(read_all(path) == read_all(p2));
  }

  SUBCASE("corrupt magic raises a format error") {
    auto bytes = read_all(path);
    bytes[0] ^= 0x40;
    std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }

  SUBCASE("corrupt version raises a format error") {
    auto bytes = read_all(path);
    bytes[5] ^= 0xff;
    std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }

  SUBCASE("corrupt dimension raises a format error, never a wrong tensor") {
    auto bytes = read_all(path);
    // Offset of the first dim's high byte: header(49) + config(11) + name_len(8)
    // + name(1) + rank(8) + 7.
    const size_t dim_hi = 49 + 11 + 8 + 1 + 8 + 7;
    bytes[dim_hi] = static_cast<char>(0xff);
    std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }

  SUBCASE("truncation raises a format error") {
    auto bytes = read_all(path);
    bytes.resize(bytes.size() - 9);
    std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }

  SUBCASE("missing file is an io error") {
    CHECK_THROWS_AS(load_checkpoint((tmp.path / "none.ckpt").string()), IoError);
  }
}
