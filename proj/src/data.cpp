#include "ntklab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "ntklab/binary_io.hpp"
#include "ntklab/seed.hpp"

namespace ntklab {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
constexpr double kSphereTolerance = 1e-6;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t header_word(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (bytes.size() < offset + 4)
    throw IdxParseError("truncated IDX header", offset);
  return binary::read_be32(bytes.data() + offset);
}

}  // namespace

IdxParseError::IdxParseError(const std::string& what, std::size_t offset)
    : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes) {
  const std::uint32_t magic = header_word(bytes, 0);
  if (magic != kIdxImagesMagic) {
    std::ostringstream os;
    os << "bad IDX image magic 0x" << std::hex << magic;
    throw IdxParseError(os.str(), 0);
  }
  IdxImages out;
  out.count = static_cast<int>(header_word(bytes, 4));
  out.rows = static_cast<int>(header_word(bytes, 8));
  out.cols = static_cast<int>(header_word(bytes, 12));
  const std::size_t pixels = static_cast<std::size_t>(out.rows) * out.cols;
  const std::size_t need = 16 + pixels * static_cast<std::size_t>(out.count);
  if (bytes.size() < need)
    throw IdxParseError("truncated IDX image payload (expected " + std::to_string(need) +
                            " bytes)",
                        bytes.size());
  out.pixels.resize(static_cast<Eigen::Index>(pixels), out.count);
  const std::uint8_t* p = bytes.data() + 16;
  for (int c = 0; c < out.count; ++c)
    for (std::size_t i = 0; i < pixels; ++i)
      out.pixels(static_cast<Eigen::Index>(i), c) = static_cast<double>(*p++) / 255.0;
  return out;
}

std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  const std::uint32_t magic = header_word(bytes, 0);
  if (magic != kIdxLabelsMagic) {
    std::ostringstream os;
    os << "bad IDX label magic 0x" << std::hex << magic;
    throw IdxParseError(os.str(), 0);
  }
  const std::size_t count = header_word(bytes, 4);
  if (bytes.size() < 8 + count)
    throw IdxParseError("truncated IDX label payload (expected " + std::to_string(8 + count) +
                            " bytes)",
                        bytes.size());
  return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count)};
}

IdxData load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path) {
  const auto img_bytes = read_file(images_path);
  const auto lbl_bytes = read_file(labels_path);
  IdxData d{parse_idx_images(img_bytes), parse_idx_labels(lbl_bytes)};
  if (static_cast<std::size_t>(d.images.count) != d.labels.size())
    throw std::runtime_error("IDX count mismatch: " + std::to_string(d.images.count) +
                             " images vs " + std::to_string(d.labels.size()) + " labels");
  return d;
}

Eigen::VectorXd binarize(const std::vector<int>& labels, const std::set<int>& positive) {
  const std::set<int> present(labels.begin(), labels.end());
  std::size_t covered = 0;
  for (int c : present) covered += positive.count(c);
  if (positive.empty() || covered == 0 || covered == present.size())
    throw std::invalid_argument("class split must cover some but not all present classes");
  Eigen::VectorXd y(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i)
    y(static_cast<Eigen::Index>(i)) = positive.count(labels[i]) ? 1.0 : -1.0;
  return y;
}

std::vector<int> balanced_subsample(const std::vector<int>& labels, int per_class,
                                    std::uint64_t seed) {
  std::map<int, std::vector<int>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i)
    by_class[labels[i]].push_back(static_cast<int>(i));
  std::vector<int> out;
  for (auto& [cls, idx] : by_class) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(cls)));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto take = std::min<std::size_t>(idx.size(), static_cast<std::size_t>(per_class));
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(out.begin(), out.end());
  return out;
}

Eigen::VectorXd sphere_normalize(const Eigen::VectorXd& pattern) {
  const double norm = pattern.norm();
  if (!(norm > 0.0) || !std::isfinite(norm))
    throw std::invalid_argument("cannot sphere-normalize a zero-norm pattern");
  return pattern * (std::sqrt(static_cast<double>(pattern.size())) / norm);
}

void sphere_normalize_columns(Eigen::MatrixXd& patterns) {
  for (Eigen::Index c = 0; c < patterns.cols(); ++c)
    patterns.col(c) = sphere_normalize(patterns.col(c));
}

PcaBasis pca_fit(const Eigen::MatrixXd& patterns, int k) {
  const Eigen::Index d = patterns.rows();
  const Eigen::Index n = patterns.cols();
  if (k < 1 || k > d) throw std::invalid_argument("pca: need 1 <= k <= d");
  if (n <= k) throw std::invalid_argument("pca: need more patterns than components");

  PcaBasis b;
  b.mean = patterns.rowwise().mean();
  const Eigen::MatrixXd centered = patterns.colwise() - b.mean;
  const Eigen::MatrixXd cov = centered * centered.transpose() / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("pca: eigendecomposition failed");

  // Descending eigenvalues; equal values keep their index order.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  const Eigen::VectorXd& ev = eig.eigenvalues();
  std::stable_sort(order.begin(), order.end(),
                   [&ev](Eigen::Index a, Eigen::Index c) { return ev(a) > ev(c); });

  const double top = std::max(ev(order.front()), 0.0);
  const double tol = top * 1e-12 * static_cast<double>(d);
  int rank = 0;
  for (auto i : order)
    if (ev(i) > tol) ++rank;
  if (rank < k)
    throw std::invalid_argument("pca: data rank " + std::to_string(rank) +
                                " is below requested k=" + std::to_string(k));

  b.components.resize(d, k);
  b.variances.resize(k);
  for (int j = 0; j < k; ++j) {
    Eigen::VectorXd v = eig.eigenvectors().col(order[static_cast<std::size_t>(j)]);
    // Sign convention: largest-magnitude entry positive.
    Eigen::Index imax = 0;
    v.cwiseAbs().maxCoeff(&imax);
    if (v(imax) < 0.0) v = -v;
    b.components.col(j) = v;
    b.variances(j) = ev(order[static_cast<std::size_t>(j)]);
  }
  return b;
}

Eigen::MatrixXd pca_project(const PcaBasis& basis, const Eigen::MatrixXd& patterns) {
  if (patterns.rows() != basis.mean.size()) throw DimensionError("pca_project: dimension mismatch");
  Eigen::MatrixXd proj = basis.components.transpose() * (patterns.colwise() - basis.mean);
  sphere_normalize_columns(proj);
  return proj;
}

std::pair<PcaBasis, Eigen::MatrixXd> pca_fit_project(const Eigen::MatrixXd& patterns, int k) {
  PcaBasis b = pca_fit(patterns, k);
  Eigen::MatrixXd proj = pca_project(b, patterns);
  return {std::move(b), std::move(proj)};
}

void Dataset::validate() const {
  if (train_x.rows() != test_x.rows() && test_x.cols() > 0)
    throw DimensionError("train and test patterns differ in dimension");
  if (train_y.size() != train_x.cols() || test_y.size() != test_x.cols())
    throw DimensionError("label count does not match pattern count");
  const double d = static_cast<double>(train_x.rows());
  auto check = [d](const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const char* which) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double sq = x.col(c).squaredNorm();
      if (std::abs(sq - d) > kSphereTolerance * d)
        throw std::invalid_argument(std::string(which) + " pattern " + std::to_string(c) +
                                    " is off the sphere (|x|^2=" + std::to_string(sq) + ")");
      if (y(c) != 1.0 && y(c) != -1.0)
        throw std::invalid_argument(std::string(which) + " label " + std::to_string(c) +
                                    " is not +-1");
    }
  };
  check(train_x, train_y, "train");
  check(test_x, test_y, "test");
}

Dataset Dataset::with_train_size(int n) const {
  if (n < 1 || n > n_train())
    throw std::invalid_argument("with_train_size: n out of range");
  Dataset out = *this;
  out.train_x = train_x.leftCols(n);
  out.train_y = train_y.head(n);
  out.provenance["n_train"] = n;
  return out;
}

NetworkParams teacher_network(std::uint64_t seed, int d, const TeacherSpec& teacher) {
  Architecture arch;
  arch.input_dim = d;
  arch.width = teacher.width;
  arch.depth = teacher.depth;
  arch.activation = teacher.activation;
  return init_gaussian(arch, derive_seed(seed, 0x7eac4e7ull));
}

Dataset synthetic_teacher(std::uint64_t seed, int d, int n_train, int n_test,
                          const TeacherSpec& teacher) {
  if (d < 1 || n_train < 1 || n_test < 0)
    throw std::invalid_argument("synthetic_teacher: bad sizes");
  const NetworkParams net = teacher_network(seed, d, teacher);

  std::mt19937_64 rng(derive_seed(seed, 1));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd x(d, n_train + n_test);
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index i = 0; i < d; ++i) x(i, c) = normal(rng);
  }
  sphere_normalize_columns(x);

  const Eigen::VectorXd f = outputs(net, x);
  const auto total = static_cast<double>(f.size());
  const double positive_frac = static_cast<double>((f.array() > 0.0).count()) / total;
  double shift = 0.0;
  if (std::abs(positive_frac - 0.5) > 0.05) {
    std::vector<double> sorted(f.data(), f.data() + f.size());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = sorted.size() / 2;
    shift = sorted.size() % 2 ? sorted[m] : 0.5 * (sorted[m - 1] + sorted[m]);
  }
  Eigen::VectorXd y(f.size());
  for (Eigen::Index i = 0; i < f.size(); ++i) y(i) = f(i) - shift >= 0.0 ? 1.0 : -1.0;

  Dataset ds;
  ds.train_x = x.leftCols(n_train);
  ds.train_y = y.head(n_train);
  ds.test_x = x.rightCols(n_test);
  ds.test_y = y.tail(n_test);
  ds.provenance = {{"source", "teacher"},
                   {"seed", seed},
                   {"d", d},
                   {"n_train", n_train},
                   {"n_test", n_test},
                   {"teacher_width", teacher.width},
                   {"teacher_depth", teacher.depth},
                   {"teacher_activation", teacher.activation.name()},
                   {"label_threshold_shift", shift},
                   {"normalization", "sphere"}};
  return ds;
}

Dataset make_image_dataset(const IdxData& train, const IdxData& test,
                           const ImageSplitConfig& cfg) {
  auto select = [&](const IdxData& src, int per_class, std::uint64_t seed,
                    Eigen::MatrixXd& x, Eigen::VectorXd& y) {
    const auto idx = balanced_subsample(src.labels, per_class, seed);
    x.resize(src.images.pixels.rows(), static_cast<Eigen::Index>(idx.size()));
    std::vector<int> picked;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      x.col(static_cast<Eigen::Index>(j)) = src.images.pixels.col(idx[j]);
      picked.push_back(src.labels[static_cast<std::size_t>(idx[j])]);
    }
    y = binarize(picked, cfg.positive_classes);
  };

  Dataset ds;
  select(train, cfg.train_per_class, derive_seed(cfg.seed, 11), ds.train_x, ds.train_y);
  select(test, cfg.test_per_class, derive_seed(cfg.seed, 12), ds.test_x, ds.test_y);

  if (cfg.pca_rank) {
    PcaBasis basis = pca_fit(ds.train_x, *cfg.pca_rank);
    ds.train_x = pca_project(basis, ds.train_x);
    ds.test_x = pca_project(basis, ds.test_x);
  } else {
    sphere_normalize_columns(ds.train_x);
    sphere_normalize_columns(ds.test_x);
  }
  ds.provenance = {{"source", cfg.source},
                   {"seed", cfg.seed},
                   {"positive_classes", cfg.positive_classes},
                   {"train_per_class", cfg.train_per_class},
                   {"test_per_class", cfg.test_per_class},
                   {"pca_rank", cfg.pca_rank ? nlohmann::json(*cfg.pca_rank) : nlohmann::json()},
                   {"n_train", ds.n_train()},
                   {"n_test", ds.n_test()},
                   {"normalization", "sphere"}};
  return ds;
}

void save_dataset_cache(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {{"provenance", ds.provenance},
                             {"d", ds.dim()},
                             {"n_train", ds.n_train()},
                             {"n_test", ds.n_test()},
                             {"patterns", "patterns.f64"},
                             {"labels", "labels.u8"}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';

  std::ofstream px(dir / "patterns.f64", std::ios::binary);
  std::ofstream lb(dir / "labels.u8", std::ios::binary);
  auto emit = [&](const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      for (Eigen::Index i = 0; i < x.rows(); ++i) binary::put_f64(px, x(i, c));
      lb.put(y(c) > 0 ? 1 : 0);
    }
  };
  emit(ds.train_x, ds.train_y);
  emit(ds.test_x, ds.test_y);
  if (!px || !lb) throw std::runtime_error("failed writing dataset cache in " + dir.string());
}

Dataset load_dataset_cache(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("missing dataset manifest in " + dir.string());
  const nlohmann::json manifest = nlohmann::json::parse(mf);
  const int d = manifest.at("d");
  const int n_train = manifest.at("n_train");
  const int n_test = manifest.at("n_test");

  std::ifstream px(dir / "patterns.f64", std::ios::binary);
  std::ifstream lb(dir / "labels.u8", std::ios::binary);
  if (!px || !lb) throw std::runtime_error("missing dataset blobs in " + dir.string());
  auto take = [&](int n, Eigen::MatrixXd& x, Eigen::VectorXd& y) {
    x.resize(d, n);
    y.resize(n);
    for (Eigen::Index c = 0; c < n; ++c) {
      for (Eigen::Index i = 0; i < d; ++i) x(i, c) = binary::get_f64(px);
      const int b = lb.get();
      if (b == EOF) throw std::runtime_error("truncated label blob");
      y(c) = b ? 1.0 : -1.0;
    }
  };
  Dataset ds;
  take(n_train, ds.train_x, ds.train_y);
  take(n_test, ds.test_x, ds.test_y);
  ds.provenance = manifest.at("provenance");
  ds.validate();
  return ds;
}

}  // namespace ntklab
