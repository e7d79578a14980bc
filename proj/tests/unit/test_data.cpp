#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "helpers.hpp"
#include "ntklab/data.hpp"

using namespace ntklab;

namespace {

void push_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

std::vector<std::uint8_t> idx_images(int count, int rows, int cols,
                                     const std::vector<std::uint8_t>& pixels) {
  std::vector<std::uint8_t> b;
  push_be32(b, 0x00000803);
  push_be32(b, static_cast<std::uint32_t>(count));
  push_be32(b, static_cast<std::uint32_t>(rows));
  push_be32(b, static_cast<std::uint32_t>(cols));
  b.insert(b.end(), pixels.begin(), pixels.end());
  return b;
}

std::vector<std::uint8_t> idx_labels(const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> b;
  push_be32(b, 0x00000801);
  push_be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()),
                                           static_cast<std::streamsize>(b.size()));
}

// Ten classes of random 3x3 images, `per_class` of each.
IdxData fake_images(int per_class, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  IdxData d;
  d.images.count = 10 * per_class;
  d.images.rows = d.images.cols = 3;
  d.images.pixels.resize(9, d.images.count);
  for (int c = 0; c < d.images.count; ++c) {
    for (int i = 0; i < 9; ++i) d.images.pixels(i, c) = u(rng);
    d.labels.push_back(c % 10);
  }
  return d;
}

void check_sphere(const Eigen::MatrixXd& x) {
  for (Eigen::Index c = 0; c < x.cols(); ++c)
    CHECK(x.col(c).squaredNorm() == doctest::Approx(static_cast<double>(x.rows())).epsilon(1e-12));
}

}  // namespace

TEST_CASE("idx images parse from hand-made bytes") {
  const std::vector<std::uint8_t> px{0, 255, 51, 102, 1, 2, 3, 4};
  const IdxImages im = parse_idx_images(idx_images(2, 2, 2, px));
  CHECK(im.count == 2);
  CHECK(im.rows == 2);
  CHECK(im.cols == 2);
  REQUIRE(im.pixels.rows() == 4);
  REQUIRE(im.pixels.cols() == 2);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i) CHECK(im.pixels(i, c) == px[4 * c + i] / 255.0);

  const std::vector<int> lab = parse_idx_labels(idx_labels({7, 3}));
  CHECK(lab == std::vector<int>{7, 3});
}

TEST_CASE("idx errors name the offset") {
  auto bytes = idx_images(2, 2, 2, {1, 2, 3, 4, 5, 6, 7});  // one pixel short
  try {
    parse_idx_images(bytes);
    FAIL("expected a parse error");
  } catch (const IdxParseError& e) {
    CHECK(e.offset() == bytes.size());
    CHECK(std::string(e.what()).find("offset 23") != std::string::npos);
  }
  const std::vector<std::uint8_t> short_header{0, 0, 8, 3, 0, 0};
  try {
    parse_idx_images(short_header);
    FAIL("expected a parse error");
  } catch (const IdxParseError& e) {
    CHECK(e.offset() == 4);
  }
  CHECK_THROWS_AS(parse_idx_images(idx_labels({1})), IdxParseError);
  CHECK_THROWS_AS(parse_idx_labels(idx_images(1, 1, 1, {0})), IdxParseError);
  auto lab = idx_labels({1, 2, 3});
  lab.pop_back();
  CHECK_THROWS_AS(parse_idx_labels(lab), IdxParseError);
}

TEST_CASE("load_idx checks counts across files") {
  const auto dir = std::filesystem::temp_directory_path() / "ntklab_idx_test";
  std::filesystem::create_directories(dir);
  write_bytes(dir / "img", idx_images(2, 1, 2, {10, 20, 30, 40}));
  write_bytes(dir / "lab2", idx_labels({0, 1}));
  write_bytes(dir / "lab3", idx_labels({0, 1, 2}));
  const IdxData d = load_idx(dir / "img", dir / "lab2");
  CHECK(d.images.pixels(1, 1) == 40 / 255.0);
  CHECK(d.labels == std::vector<int>{0, 1});
  CHECK_THROWS(load_idx(dir / "img", dir / "lab3"));
  CHECK_THROWS(load_idx(dir / "missing", dir / "lab2"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("binarize") {
  const std::set<int> low{0, 1, 2, 3, 4};
  CHECK(binarize({3, 7}, low) == Eigen::Vector2d(1, -1));
  const std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 0};
  const std::set<int> high{5, 6, 7, 8, 9};
  CHECK(binarize(labels, high) == -binarize(labels, low));
  CHECK_THROWS(binarize(labels, {}));
  CHECK_THROWS(binarize({1, 2}, {1, 2}));
  CHECK_THROWS(binarize({1, 2}, {5}));
}

TEST_CASE("balanced subsample") {
  std::vector<int> labels;
  for (int i = 0; i < 300; ++i) labels.push_back(i % 3 == 0 ? 0 : (i % 3 == 1 ? 1 : 2));
  labels.push_back(2);
  const auto idx = balanced_subsample(labels, 40, 5);
  CHECK(idx.size() == 120);
  std::map<int, int> counts;
  for (int i : idx) ++counts[labels[static_cast<std::size_t>(i)]];
  CHECK(counts[0] == 40);
  CHECK(counts[1] == 40);
  CHECK(counts[2] == 40);
  CHECK(std::is_sorted(idx.begin(), idx.end()));
  CHECK(idx == balanced_subsample(labels, 40, 5));
  CHECK(idx != balanced_subsample(labels, 40, 6));
  // asking for more than available takes everything
  CHECK(balanced_subsample(labels, 1000, 5).size() == labels.size());
}

TEST_CASE("sphere normalization") {
  const Eigen::VectorXd v = sphere_normalize(Eigen::Vector2d(3, 4));
  CHECK(v[0] == doctest::Approx(3 * std::sqrt(2.0) / 5).epsilon(1e-15));
  CHECK(v[1] == doctest::Approx(4 * std::sqrt(2.0) / 5).epsilon(1e-15));
  CHECK(v.squaredNorm() == doctest::Approx(2.0).epsilon(1e-12));
  const Eigen::VectorXd again = sphere_normalize(v);
  CHECK((again - v).cwiseAbs().maxCoeff() < 1e-15);
  CHECK_THROWS(sphere_normalize(Eigen::VectorXd::Zero(3)));
  Eigen::MatrixXd m = Eigen::MatrixXd::Random(7, 5);
  sphere_normalize_columns(m);
  check_sphere(m);
}

TEST_CASE("pca on data in a plane") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  const Eigen::Vector4d u(1, 1, 0, 0), v(0, 0, 1, -1);
  const Eigen::Vector4d offset(0.5, -1, 2, 0);
  Eigen::MatrixXd x(4, 50);
  for (int c = 0; c < 50; ++c) x.col(c) = offset + g(rng) * u + 0.5 * g(rng) * v;
  const PcaBasis b = pca_fit(x, 2);
  CHECK((b.components.transpose() * b.components - Eigen::Matrix2d::Identity()).norm() < 1e-8);
  CHECK(b.variances[0] >= b.variances[1]);
  const Eigen::MatrixXd centered = x.colwise() - b.mean;
  const Eigen::MatrixXd recon = b.components * (b.components.transpose() * centered);
  CHECK((recon - centered).norm() < 1e-10 * centered.norm());
  auto [basis, proj] = pca_fit_project(x, 2);
  CHECK(proj.rows() == 2);
  check_sphere(proj);
  // rank 2 data cannot give three components
  try {
    pca_fit(x, 3);
    FAIL("expected a rank error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("rank 2") != std::string::npos);
  }
  CHECK_THROWS(pca_fit(x, 0));
  CHECK_THROWS(pca_fit(x.leftCols(2), 2));
}

TEST_CASE("pca recovers the dominant axis of a known covariance") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g;
  Eigen::MatrixXd x(2, 20000);
  for (Eigen::Index c = 0; c < x.cols(); ++c) x.col(c) = Eigen::Vector2d(3 * g(rng), g(rng));
  const PcaBasis b = pca_fit(x, 2);
  const double angle = std::acos(std::min(1.0, std::abs(b.components(0, 0))));
  CHECK(angle < 1e-2);
  CHECK(b.variances[0] == doctest::Approx(9.0).epsilon(0.05));
  CHECK(b.variances[1] == doctest::Approx(1.0).epsilon(0.05));
  CHECK(b.components(0, 0) > 0.0);  // sign convention
}

TEST_CASE("teacher dataset") {
  const Dataset a = synthetic_teacher(9, 6, 200, 300);
  const Dataset b = synthetic_teacher(9, 6, 200, 300);
  CHECK(a.train_x == b.train_x);
  CHECK(a.test_y == b.test_y);
  CHECK(a.train_x != synthetic_teacher(10, 6, 200, 300).train_x);
  CHECK_NOTHROW(a.validate());
  check_sphere(a.train_x);
  check_sphere(a.test_x);
  CHECK(a.provenance.at("source") == "teacher");

  // labels regenerate from the stored seed
  const NetworkParams t = teacher_network(9, 6, {});
  const double shift = a.provenance.at("label_threshold_shift");
  const Eigen::VectorXd f = outputs(t, a.train_x);
  for (Eigen::Index i = 0; i < f.size(); ++i)
    CHECK(a.train_y[i] == (f[i] - shift >= 0.0 ? 1.0 : -1.0));

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Dataset d = synthetic_teacher(seed, 10, 500, 500, {.width = 16, .depth = 1});
    Eigen::VectorXd all(1000);
    all << d.train_y, d.test_y;
    const double pos = (all.array() > 0).cast<double>().mean();
    CAPTURE(seed);
    CHECK(std::abs(pos - 0.5) <= 0.05);
  }
  CHECK_THROWS(synthetic_teacher(1, 0, 10, 10));
}

TEST_CASE("dataset validation and truncation") {
  Dataset d = synthetic_teacher(1, 4, 20, 10);
  const Dataset small = d.with_train_size(5);
  CHECK(small.n_train() == 5);
  CHECK(small.train_x == d.train_x.leftCols(5));
  CHECK(small.n_test() == 10);
  CHECK_THROWS(d.with_train_size(21));
  d.train_x(0, 3) *= 1.01;
  CHECK_THROWS(d.validate());
  Dataset e = synthetic_teacher(1, 4, 20, 10);
  e.test_y[2] = 0.0;
  CHECK_THROWS(e.validate());
  e.test_y.resize(3);
  CHECK_THROWS_AS(e.validate(), DimensionError);
}

TEST_CASE("image dataset split, balance and projection") {
  const IdxData train = fake_images(30, 1), test = fake_images(50, 2);
  ImageSplitConfig cfg;
  cfg.train_per_class = 20;
  cfg.test_per_class = 40;
  cfg.seed = 4;
  const Dataset d = make_image_dataset(train, test, cfg);
  CHECK(d.n_train() == 200);
  CHECK(d.n_test() == 400);
  CHECK(d.dim() == 9);
  CHECK(d.train_y.sum() == 0.0);  // five classes each side
  CHECK(d.test_y.sum() == 0.0);
  CHECK_NOTHROW(d.validate());
  CHECK(d.provenance.at("positive_classes") == nlohmann::json({0, 1, 2, 3, 4}));
  CHECK(make_image_dataset(train, test, cfg).train_x == d.train_x);

  cfg.pca_rank = 4;
  const Dataset p = make_image_dataset(train, test, cfg);
  CHECK(p.dim() == 4);
  check_sphere(p.train_x);
  check_sphere(p.test_x);
  CHECK(p.provenance.at("pca_rank") == 4);
}

TEST_CASE("dataset cache round trip") {
  const Dataset d = synthetic_teacher(2, 5, 30, 20);
  const auto dir = std::filesystem::temp_directory_path() / "ntklab_cache_test";
  std::filesystem::remove_all(dir);
  save_dataset_cache(d, dir);
  CHECK(std::filesystem::file_size(dir / "patterns.f64") == 8 * 5 * 50);
  CHECK(std::filesystem::file_size(dir / "labels.u8") == 50);
  const Dataset back = load_dataset_cache(dir);
  CHECK(back.train_x == d.train_x);
  CHECK(back.train_y == d.train_y);
  CHECK(back.test_x == d.test_x);
  CHECK(back.test_y == d.test_y);
  CHECK(back.provenance == d.provenance);

  // first f64 is little-endian
  std::ifstream in(dir / "patterns.f64", std::ios::binary);
  unsigned char raw[8];
  in.read(reinterpret_cast<char*>(raw), 8);
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | raw[i];
  double first;
  std::memcpy(&first, &bits, 8);
  CHECK(first == d.train_x(0, 0));

  std::filesystem::resize_file(dir / "labels.u8", 10);
  CHECK_THROWS(load_dataset_cache(dir));
  std::filesystem::remove_all(dir);
  CHECK_THROWS(load_dataset_cache(dir));
}
