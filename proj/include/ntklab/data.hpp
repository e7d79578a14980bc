#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ntklab/net.hpp"

namespace ntklab {

/// Binary classification data. Patterns are stored column-wise (d x n) and
/// every column lies on the sphere of radius sqrt(d).
struct Dataset {
  Eigen::MatrixXd train_x;
  Eigen::VectorXd train_y;
  Eigen::MatrixXd test_x;
  Eigen::VectorXd test_y;
  nlohmann::json provenance = nlohmann::json::object();

  int dim() const { return static_cast<int>(train_x.rows()); }
  int n_train() const { return static_cast<int>(train_x.cols()); }
  int n_test() const { return static_cast<int>(test_x.cols()); }

  /// Throws if shapes, labels or the sphere constraint are violated.
  void validate() const;
  /// Copy keeping only the first n training patterns.
  Dataset with_train_size(int n) const;
};

class IdxParseError : public std::runtime_error {
 public:
  IdxParseError(const std::string& what, std::size_t offset);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct IdxImages {
  int count = 0;
  int rows = 0;
  int cols = 0;
  Eigen::MatrixXd pixels;  // (rows*cols) x count, scaled to [0, 1]
};

struct IdxData {
  IdxImages images;
  std::vector<int> labels;
};

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes);
IdxData load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

/// Classes in `positive` map to +1, every other class to -1.
Eigen::VectorXd binarize(const std::vector<int>& labels, const std::set<int>& positive);

/// Up to `per_class` indices of every class, chosen by a seeded shuffle, in ascending order.
std::vector<int> balanced_subsample(const std::vector<int>& labels, int per_class,
                                    std::uint64_t seed);

Eigen::VectorXd sphere_normalize(const Eigen::VectorXd& pattern);
void sphere_normalize_columns(Eigen::MatrixXd& patterns);

struct PcaBasis {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // d x k, orthonormal columns
  Eigen::VectorXd variances;   // non-increasing
};

PcaBasis pca_fit(const Eigen::MatrixXd& patterns, int k);
/// Centered projection onto the basis, each result rescaled to the k-sphere.
Eigen::MatrixXd pca_project(const PcaBasis& basis, const Eigen::MatrixXd& patterns);
std::pair<PcaBasis, Eigen::MatrixXd> pca_fit_project(const Eigen::MatrixXd& patterns, int k);

struct TeacherSpec {
  int width = 32;
  int depth = 2;
  Activation activation = Activation::make_softplus();
};

/// Patterns uniform on the d-sphere, labelled by the sign of a random teacher network.
Dataset synthetic_teacher(std::uint64_t seed, int d, int n_train, int n_test,
                          const TeacherSpec& teacher = {});
/// The teacher network used by synthetic_teacher for a given seed and dimension.
NetworkParams teacher_network(std::uint64_t seed, int d, const TeacherSpec& teacher);

struct ImageSplitConfig {
  std::set<int> positive_classes{0, 1, 2, 3, 4};
  int train_per_class = 100;
  int test_per_class = 200;
  std::optional<int> pca_rank;  // project onto the leading components when set
  std::uint64_t seed = 0;
  std::string source = "idx";
};

Dataset make_image_dataset(const IdxData& train, const IdxData& test,
                           const ImageSplitConfig& cfg);

/// Cache layout: manifest.json, patterns.f64 (little-endian, train then test,
/// column after column) and labels.u8 (1 for +1, 0 for -1).
void save_dataset_cache(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset_cache(const std::filesystem::path& dir);

}  // namespace ntklab
