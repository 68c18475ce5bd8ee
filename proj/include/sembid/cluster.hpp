#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sembid/ingest.hpp"
#include "sembid/intent_embed.hpp"

namespace sembid {

inline constexpr double kDefaultClusterThreshold = 0.35;

struct ClassifierConfig {
  int hidden = 32;
  double learning_rate = 1e-2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int batch_size = 32;
  int epochs = 50;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 1;

  void validate() const;
};

// One hidden tanh layer followed by a softmax over product-type labels.
// Labels are kept sorted; "label index" always refers to that order.
class ProductTypeClassifier {
 public:
  ProductTypeClassifier(std::vector<std::string> labels, Matrix w1, Matrix b1, Matrix w2, Matrix b2);
  // Seeded uniform(+-1/sqrt(fan_in)) initialization.
  ProductTypeClassifier(std::vector<std::string> labels, std::size_t input_dim, int hidden, std::uint64_t seed);

  std::vector<double> probabilities(std::span<const double> embedding) const;
  // Argmax of probabilities; the smallest index wins exact ties.
  std::size_t predict_index(std::span<const double> embedding) const;
  const std::string& predict(std::span<const double> embedding) const;

  const std::vector<std::string>& labels() const { return labels_; }
  std::size_t input_dim() const { return static_cast<std::size_t>(w1_.rows()); }

  Matrix& w1() { return w1_; }
  Matrix& b1() { return b1_; }
  Matrix& w2() { return w2_; }
  Matrix& b2() { return b2_; }
  const Matrix& w1() const { return w1_; }
  const Matrix& b1() const { return b1_; }
  const Matrix& w2() const { return w2_; }
  const Matrix& b2() const { return b2_; }

  std::string serialize() const;
  static ProductTypeClassifier deserialize(const std::string& text, const std::string& source = "<classifier>");
  void save(const std::string& path) const;
  static ProductTypeClassifier load(const std::string& path);

 private:
  std::vector<std::string> labels_;
  Matrix w1_, b1_, w2_, b2_;
};

struct LabeledEmbedding {
  Embedding embedding;
  std::string label;
};

struct ClassifierTrainResult {
  ProductTypeClassifier classifier;
  double holdout_accuracy = 0.0;  // on the seeded holdout; train accuracy if none
  double train_accuracy = 0.0;
  std::size_t holdout_size = 0;
};

// Cross-entropy with ADAM on mini-batches. A seeded holdout_fraction of the
// samples is kept out of training and used for the reported accuracy.
ClassifierTrainResult train_classifier(std::span<const LabeledEmbedding> samples, const ClassifierConfig& cfg);

double classifier_accuracy(const ProductTypeClassifier& clf, std::span<const LabeledEmbedding> samples);

// Single-item ads that carry a catalog product type, in catalog order.
std::vector<LabeledEmbedding> classifier_training_set(std::span<const Ad> ads,
                                                      const std::map<std::string, Embedding>& embeddings);

struct CatalogClassifier {
  std::optional<ProductTypeClassifier> classifier;  // empty when no ad is labelled
  double holdout_accuracy = 0.0;
  std::size_t labeled = 0;
};

// Trains on the labelled single-item ads. With a single label the result is
// an untrained classifier that can only answer that label.
CatalogClassifier fit_catalog_classifier(std::span<const Ad> ads, const std::map<std::string, Embedding>& embeddings,
                                         const ClassifierConfig& cfg);

// Single-item ads with a catalog label keep it; everything else goes through
// the classifier, which must then be present.
std::string assign_product_type(const Ad& ad, std::span<const double> embedding,
                                const ProductTypeClassifier* clf);

struct Partition {
  std::vector<std::size_t> labels;                 // cluster ordinal per input
  std::vector<std::vector<std::size_t>> clusters;  // members ascending; clusters by smallest member
  bool operator==(const Partition&) const = default;
};

double cosine_distance(std::span<const double> a, std::span<const double> b);

// Average-linkage agglomeration under cosine distance. Clusters are merged
// while the smallest linkage is <= threshold; among equal linkages the pair
// with the smallest (i, j) wins, where a cluster is identified by its
// smallest member index.
Partition agglomerate(std::span<const Embedding> embeddings, double threshold);

struct AdGroup {
  std::string group_id;
  std::string product_type;
  std::vector<std::string> members;  // sorted
  Embedding centroid;
  bool operator==(const AdGroup&) const = default;
};

struct GroupingStats {
  std::size_t ads = 0;
  std::size_t groups = 0;
  std::size_t product_types = 0;
  std::size_t classified = 0;  // ads labelled by the classifier
};

// Per-product-type agglomeration. Groups come out ordered by product type
// then cluster; ids are "<product_type>_<ordinal>".
std::vector<AdGroup> build_groups(std::span<const Ad> ads, const std::map<std::string, Embedding>& embeddings,
                                  const ProductTypeClassifier* clf, double threshold, int threads = 1,
                                  GroupingStats* stats = nullptr);

// Every ad alone in its own group, through the same bookkeeping as
// build_groups.
std::vector<AdGroup> singleton_groups(std::span<const Ad> ads, const std::map<std::string, Embedding>& embeddings,
                                      const ProductTypeClassifier* clf);

Embedding normalized_mean(std::span<const Embedding> vectors);

// CSV group_id,product_type,ad_id; one row per member.
void write_groups(const std::string& path, std::span<const AdGroup> groups);
// Centroids are recomputed from the embeddings when given.
std::vector<AdGroup> read_groups(const std::string& path,
                                 const std::map<std::string, Embedding>* embeddings = nullptr);

}  // namespace sembid
