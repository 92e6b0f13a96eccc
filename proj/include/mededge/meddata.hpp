#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "mededge/image.hpp"
#include "mededge/train.hpp"

namespace mededge {

/// Lower-cased, surrounding whitespace removed, inner spaces as '_'.
std::string normalize_name(std::string_view name);

class SymptomVocabulary {
 public:
  SymptomVocabulary() = default;
  /// Names are normalised; duplicates or empty names throw InputError.
  explicit SymptomVocabulary(std::vector<std::string> names);

  /// Built-in clinical names first, then "symptom_NNN" filler.
  static SymptomVocabulary generated(int n);
  /// One name per line; index = line number.
  static SymptomVocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  std::optional<std::size_t> index_of(std::string_view name) const;

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
};

class DiseaseCatalog {
 public:
  DiseaseCatalog() = default;
  /// `treatments` may be shorter than `names`; missing entries are empty.
  DiseaseCatalog(std::vector<std::string> names, std::vector<std::string> treatments = {});

  /// Built-in names then "condition_NNNN"; roughly one disease in six has no
  /// treatment text.
  static DiseaseCatalog generated(int n, std::uint64_t seed);
  /// Names one per line; treatment table "disease_id<TAB>text" per line.
  static DiseaseCatalog load(const std::filesystem::path& names_path,
                             const std::filesystem::path& treatments_path = {});
  void save(const std::filesystem::path& names_path,
            const std::filesystem::path& treatments_path) const;

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::string& name(std::size_t id) const { return names_.at(id); }
  const std::string& treatment(std::size_t id) const { return treatments_.at(id); }

 private:
  std::vector<std::string> names_;
  std::vector<std::string> treatments_;
};

/// Multi-hot vector with 1.0 at each named symptom. Throws InputError listing
/// every unknown name.
std::vector<float> encode_symptoms(std::span<const std::string> names,
                                   const SymptomVocabulary& vocab);

/// Ground-truth generative model: d ~ prior, symptom s ~ Bernoulli(P(d, s)),
/// then each bit flipped with probability `noise`.
struct SyntheticWorld {
  Eigen::VectorXd prior;
  Eigen::MatrixXd symptom_prob;  // diseases x symptoms, entries in [0.01, 0.99]
  double noise = 0.02;
  std::uint64_t seed = 0;

  int n_diseases() const noexcept { return static_cast<int>(symptom_prob.rows()); }
  int n_symptoms() const noexcept { return static_cast<int>(symptom_prob.cols()); }
};

/// Every disease gets a distinct signature of at least 3 symptoms with
/// P > 0.5. Throws InputError when no distinct signature can be found for a
/// disease within 100 attempts.
SyntheticWorld generate_world(int n_symptoms, int n_diseases, std::uint64_t seed,
                              double noise = 0.02);

std::string world_to_json(const SyntheticWorld& world);
SyntheticWorld world_from_json(std::string_view text);
void save_world(const SyntheticWorld& world, const std::filesystem::path& path);
SyntheticWorld load_world(const std::filesystem::path& path);

/// Exact posterior over diseases for an observed symptom vector, computed in
/// log space. Observation probabilities include the flip noise, so with
/// noise = 0 this is prior * prod P^x (1 - P)^(1 - x), normalised.
Eigen::VectorXd bayes_posterior(const SyntheticWorld& world, std::span<const float> symptoms);

using SymptomVector = std::vector<float>;

struct LabeledSample {
  std::variant<SymptomVector, Image> input;
  int label = 0;
  friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

std::vector<LabeledSample> sample_dataset(const SyntheticWorld& world, std::size_t n,
                                          std::uint64_t seed);

struct SymptomSplits {
  SyntheticWorld world;
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> test;
};

/// World from `seed`; train and test sets from independent streams of it.
SymptomSplits make_symptom_splits(int n_symptoms, int n_diseases, std::size_t n_train,
                                  std::size_t n_test, std::uint64_t seed, double noise = 0.02);

/// `per_class` renders per skin class; with augment on, each base image also
/// contributes one randomly chosen augmentation (rotation, blur, noise or
/// brightness). Order is shuffled.
std::vector<LabeledSample> generate_skin_dataset(int per_class, std::uint64_t seed, int size = 32,
                                                 bool augment = true);

/// Feature matrix (symptom vectors as-is, images scaled to [0, 1]) plus labels.
Dataset to_dataset(std::span<const LabeledSample> samples, int classes);

}  // namespace mededge
