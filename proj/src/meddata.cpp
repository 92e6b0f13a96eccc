#include "mededge/meddata.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mededge/bundle.hpp"
#include "mededge/random.hpp"

namespace mededge {

namespace {

const std::vector<std::string>& builtin_symptoms() {
  static const std::vector<std::string> names = {
      "fever", "cough", "rash", "headache", "fatigue", "nausea", "vomiting", "diarrhea",
      "abdominal_pain", "chest_pain", "shortness_of_breath", "sore_throat", "runny_nose",
      "sneezing", "muscle_ache", "joint_pain", "back_pain", "dizziness", "fainting",
      "palpitations", "chills", "night_sweats", "weight_loss", "weight_gain", "loss_of_appetite",
      "constipation", "bloating", "heartburn", "blood_in_stool", "frequent_urination",
      "painful_urination", "blood_in_urine", "itching", "hives", "swelling", "bruising",
      "jaundice", "pale_skin", "hair_loss", "dry_skin", "blurred_vision", "eye_pain",
      "red_eyes", "ear_pain", "hearing_loss", "tinnitus", "nosebleed", "wheezing",
      "hoarseness", "difficulty_swallowing", "numbness", "tingling", "weakness", "tremor",
      "seizure", "confusion", "memory_loss", "insomnia", "anxiety", "depressed_mood",
      "excessive_thirst", "cold_intolerance", "heat_intolerance", "swollen_lymph_nodes",
      "stiff_neck", "light_sensitivity"};
  return names;
}

const std::vector<std::string>& builtin_diseases() {
  static const std::vector<std::string> names = {
      "influenza", "common_cold", "strep_throat", "pneumonia", "bronchitis", "asthma",
      "covid_19", "sinusitis", "otitis_media", "conjunctivitis", "migraine", "tension_headache",
      "meningitis", "gastroenteritis", "food_poisoning", "appendicitis", "gallstones",
      "peptic_ulcer", "gerd", "irritable_bowel_syndrome", "urinary_tract_infection",
      "kidney_stones", "pyelonephritis", "hypothyroidism", "hyperthyroidism", "type_2_diabetes",
      "anemia", "hepatitis_a", "mononucleosis", "lyme_disease", "measles", "chickenpox",
      "scarlet_fever", "dengue", "malaria", "tuberculosis", "angina", "heart_failure",
      "atrial_fibrillation", "hypertension", "rheumatoid_arthritis", "gout", "osteoarthritis",
      "lumbar_strain", "vertigo", "anxiety_disorder", "depression", "insomnia_disorder",
      "allergic_rhinitis", "eczema"};
  return names;
}

const std::vector<std::string>& treatment_phrases() {
  static const std::vector<std::string> phrases = {
      "Rest, fluids and over-the-counter fever reducers.",
      "Course of oral antibiotics as prescribed; complete the full course.",
      "Antiviral medication if started early; otherwise supportive care.",
      "Inhaled bronchodilator and follow-up with a physician.",
      "Dietary adjustment, hydration and oral rehydration salts.",
      "Anti-inflammatory medication and gentle physical therapy.",
      "Urgent referral for clinical evaluation and imaging.",
      "Topical corticosteroid cream and moisturiser twice daily.",
      "Lifestyle changes: regular exercise, reduced salt and alcohol.",
      "Hormone replacement guided by blood tests.",
      "Antihistamines and avoidance of known triggers.",
      "Pain relief, cold compress and rest in a dark room."};
  return phrases;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string padded(std::string_view prefix, int value, int width) {
  std::string digits = std::to_string(value);
  if (static_cast<int>(digits.size()) < width) digits.insert(0, width - digits.size(), '0');
  return std::string(prefix) + digits;
}

}  // namespace

std::string normalize_name(std::string_view name) {
  std::size_t begin = 0, end = name.size();
  while (begin < end && std::isspace(static_cast<unsigned char>(name[begin]))) ++begin;
  while (end > begin && std::isspace(static_cast<unsigned char>(name[end - 1]))) --end;
  std::string out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) {
    const auto c = static_cast<unsigned char>(name[i]);
    out.push_back(c == ' ' ? '_' : static_cast<char>(std::tolower(c)));
  }
  return out;
}

SymptomVocabulary::SymptomVocabulary(std::vector<std::string> names) {
  names_.reserve(names.size());
  std::vector<std::string> dups;
  for (auto& n : names) {
    auto norm = normalize_name(n);
    if (norm.empty()) throw InputError("empty symptom name at index " + std::to_string(names_.size()));
    if (!index_.emplace(norm, names_.size()).second) {
      dups.push_back(norm);
      continue;
    }
    names_.push_back(std::move(norm));
  }
  if (!dups.empty()) throw InputError("duplicate symptom names in vocabulary", dups);
}

SymptomVocabulary SymptomVocabulary::generated(int n) {
  if (n < 1) throw InputError("vocabulary size must be positive");
  const auto& base = builtin_symptoms();
  std::vector<std::string> names;
  for (int i = 0; i < n; ++i) {
    names.push_back(i < static_cast<int>(base.size()) ? base[static_cast<std::size_t>(i)]
                                                      : padded("symptom_", i + 1, 3));
  }
  return SymptomVocabulary(std::move(names));
}

SymptomVocabulary SymptomVocabulary::load(const std::filesystem::path& path) {
  return SymptomVocabulary(read_lines(path));
}

void SymptomVocabulary::save(const std::filesystem::path& path) const {
  std::string text;
  for (const auto& n : names_) text += n + "\n";
  write_text(path, text);
}

std::optional<std::size_t> SymptomVocabulary::index_of(std::string_view name) const {
  auto it = index_.find(normalize_name(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

DiseaseCatalog::DiseaseCatalog(std::vector<std::string> names, std::vector<std::string> treatments)
    : names_(std::move(names)), treatments_(std::move(treatments)) {
  std::set<std::string> seen;
  std::vector<std::string> dups;
  for (auto& n : names_) {
    n = normalize_name(n);
    if (n.empty()) throw InputError("empty disease name");
    if (!seen.insert(n).second) dups.push_back(n);
  }
  if (!dups.empty()) throw InputError("duplicate disease names in catalog", dups);
  if (treatments_.size() > names_.size()) throw InputError("more treatments than diseases");
  treatments_.resize(names_.size());
}

DiseaseCatalog DiseaseCatalog::generated(int n, std::uint64_t seed) {
  if (n < 1) throw InputError("catalog size must be positive");
  const auto& base = builtin_diseases();
  const auto& phrases = treatment_phrases();
  Rng rng(mix_seed(seed, 0x7472));
  std::vector<std::string> names, treatments;
  for (int i = 0; i < n; ++i) {
    names.push_back(i < static_cast<int>(base.size()) ? base[static_cast<std::size_t>(i)]
                                                      : padded("condition_", i + 1, 4));
    const bool missing = rng.below(6) == 0;
    const auto& phrase = phrases[rng.below(phrases.size())];
    treatments.push_back(missing ? std::string() : phrase);
  }
  return DiseaseCatalog(std::move(names), std::move(treatments));
}

DiseaseCatalog DiseaseCatalog::load(const std::filesystem::path& names_path,
                                    const std::filesystem::path& treatments_path) {
  auto names = read_lines(names_path);
  std::vector<std::string> treatments(names.size());
  if (!treatments_path.empty()) {
    const auto lines = read_lines(treatments_path);
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
      const auto& line = lines[ln];
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      std::size_t id = 0;
      try {
        if (tab == std::string::npos) throw std::invalid_argument("no tab");
        std::size_t used = 0;
        id = std::stoul(line.substr(0, tab), &used);
        if (used != tab) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw InputError(treatments_path.string() + ":" + std::to_string(ln + 1) +
                         ": expected <disease_id><TAB><treatment>");
      }
      if (id >= names.size()) {
        throw InputError(treatments_path.string() + ":" + std::to_string(ln + 1) +
                         ": disease id " + std::to_string(id) + " out of range");
      }
      treatments[id] = line.substr(tab + 1);
    }
  }
  return DiseaseCatalog(std::move(names), std::move(treatments));
}

void DiseaseCatalog::save(const std::filesystem::path& names_path,
                          const std::filesystem::path& treatments_path) const {
  std::string names, table;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    names += names_[i] + "\n";
    if (!treatments_[i].empty()) table += std::to_string(i) + "\t" + treatments_[i] + "\n";
  }
  write_text(names_path, names);
  write_text(treatments_path, table);
}

std::vector<float> encode_symptoms(std::span<const std::string> names,
                                   const SymptomVocabulary& vocab) {
  std::vector<float> out(vocab.size(), 0.0f);
  std::vector<std::string> unknown;
  for (const auto& n : names) {
    if (auto idx = vocab.index_of(n)) {
      out[*idx] = 1.0f;
    } else {
      unknown.push_back(n);
    }
  }
  if (!unknown.empty()) {
    std::string msg = "unknown symptom";
    msg += unknown.size() > 1 ? "s: " : ": ";
    for (std::size_t i = 0; i < unknown.size(); ++i) msg += (i ? ", " : "") + unknown[i];
    throw InputError(msg, unknown);
  }
  return out;
}

SyntheticWorld generate_world(int n_symptoms, int n_diseases, std::uint64_t seed, double noise) {
  if (n_symptoms < 10) throw InputError("a synthetic world needs at least 10 symptoms");
  if (n_diseases < 2) throw InputError("a synthetic world needs at least 2 diseases");
  if (!(noise >= 0.0 && noise < 0.5)) throw InputError("noise rate must be in [0, 0.5)");

  Rng rng(mix_seed(seed, 0x776f726c64));
  SyntheticWorld world;
  world.seed = seed;
  world.noise = noise;
  world.prior.resize(n_diseases);
  for (int d = 0; d < n_diseases; ++d) world.prior[d] = std::exp(0.5 * rng.normal());
  world.prior /= world.prior.sum();

  world.symptom_prob.resize(n_diseases, n_symptoms);
  std::set<std::vector<int>> signatures;
  std::vector<int> order(static_cast<std::size_t>(n_symptoms));
  for (int d = 0; d < n_diseases; ++d) {
    std::vector<int> signature;
    int attempt = 0;
    for (;; ++attempt) {
      if (attempt == 100) {
        throw InputError("cannot give disease " + std::to_string(d) +
                         " a distinct signature after 100 attempts (" + std::to_string(n_symptoms) +
                         " symptoms for " + std::to_string(n_diseases) + " diseases)");
      }
      for (int s = 0; s < n_symptoms; ++s) order[static_cast<std::size_t>(s)] = s;
      shuffle(order, rng);
      const auto size = static_cast<std::size_t>(3 + rng.below(3));
      signature.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(size));
      std::sort(signature.begin(), signature.end());
      if (signatures.insert(signature).second) break;
    }
    for (int s = 0; s < n_symptoms; ++s) world.symptom_prob(d, s) = rng.uniform(0.01, 0.08);
    for (int s : signature) world.symptom_prob(d, s) = rng.uniform(0.6, 0.95);
    // Two weaker secondary symptoms outside the signature.
    for (std::size_t k = signature.size(); k < signature.size() + 2 && k < order.size(); ++k) {
      world.symptom_prob(d, order[k]) = rng.uniform(0.15, 0.45);
    }
  }
  return world;
}

std::string world_to_json(const SyntheticWorld& world) {
  nlohmann::json j;
  j["seed"] = world.seed;
  j["noise"] = world.noise;
  j["prior"] = std::vector<double>(world.prior.data(), world.prior.data() + world.prior.size());
  auto rows = nlohmann::json::array();
  for (int d = 0; d < world.n_diseases(); ++d) {
    std::vector<double> row(static_cast<std::size_t>(world.n_symptoms()));
    for (int s = 0; s < world.n_symptoms(); ++s) row[static_cast<std::size_t>(s)] = world.symptom_prob(d, s);
    rows.push_back(row);
  }
  j["symptom_prob"] = std::move(rows);
  return j.dump(1) + "\n";
}

SyntheticWorld world_from_json(std::string_view text) {
  SyntheticWorld w;
  try {
    const auto j = nlohmann::json::parse(text);
    w.seed = j.at("seed").get<std::uint64_t>();
    w.noise = j.at("noise").get<double>();
    const auto prior = j.at("prior").get<std::vector<double>>();
    const auto rows = j.at("symptom_prob").get<std::vector<std::vector<double>>>();
    if (prior.size() < 2 || rows.size() != prior.size() || rows[0].empty()) {
      throw InputError("world file: prior and symptom_prob sizes disagree");
    }
    w.prior = Eigen::Map<const Eigen::VectorXd>(prior.data(), static_cast<Eigen::Index>(prior.size()));
    w.symptom_prob.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t d = 0; d < rows.size(); ++d) {
      if (rows[d].size() != rows[0].size()) throw InputError("world file: ragged symptom_prob");
      for (std::size_t s = 0; s < rows[d].size(); ++s) {
        w.symptom_prob(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(s)) = rows[d][s];
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("world file: ") + e.what());
  }
  if (std::abs(w.prior.sum() - 1.0) > 1e-9 || (w.prior.array() < 0).any()) {
    throw InputError("world file: prior is not a distribution");
  }
  if ((w.symptom_prob.array() <= 0).any() || (w.symptom_prob.array() >= 1).any()) {
    throw InputError("world file: symptom probabilities must lie in (0, 1)");
  }
  return w;
}

void save_world(const SyntheticWorld& world, const std::filesystem::path& path) {
  write_text(path, world_to_json(world));
}

SyntheticWorld load_world(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return world_from_json(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

Eigen::VectorXd bayes_posterior(const SyntheticWorld& world, std::span<const float> x) {
  if (static_cast<int>(x.size()) != world.n_symptoms()) {
    throw DimensionError("symptom vector has " + std::to_string(x.size()) + " entries, world has " +
                         std::to_string(world.n_symptoms()));
  }
  const double eps = world.noise;
  Eigen::VectorXd logp(world.n_diseases());
  for (int d = 0; d < world.n_diseases(); ++d) {
    double acc = std::log(world.prior[d]);
    for (int s = 0; s < world.n_symptoms(); ++s) {
      const double p = world.symptom_prob(d, s);
      const double observed = p * (1.0 - eps) + (1.0 - p) * eps;
      acc += x[static_cast<std::size_t>(s)] > 0.5f ? std::log(observed) : std::log1p(-observed);
    }
    logp[d] = acc;
  }
  const double mx = logp.maxCoeff();
  Eigen::VectorXd post = (logp.array() - mx).exp();
  return post / post.sum();
}

std::vector<LabeledSample> sample_dataset(const SyntheticWorld& world, std::size_t n,
                                          std::uint64_t seed) {
  std::vector<LabeledSample> out;
  out.reserve(n);
  if (n == 0) return out;
  std::vector<double> cdf(static_cast<std::size_t>(world.n_diseases()));
  double run = 0.0;
  for (int d = 0; d < world.n_diseases(); ++d) cdf[static_cast<std::size_t>(d)] = run += world.prior[d];
  Rng rng(mix_seed(seed, 0x73616d706c65));
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform() * run;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    const int d = static_cast<int>(std::min<std::ptrdiff_t>(it - cdf.begin(), world.n_diseases() - 1));
    SymptomVector x(static_cast<std::size_t>(world.n_symptoms()));
    for (int s = 0; s < world.n_symptoms(); ++s) {
      bool bit = rng.uniform() < world.symptom_prob(d, s);
      if (rng.uniform() < world.noise) bit = !bit;
      x[static_cast<std::size_t>(s)] = bit ? 1.0f : 0.0f;
    }
    out.push_back({std::move(x), d});
  }
  return out;
}

SymptomSplits make_symptom_splits(int n_symptoms, int n_diseases, std::size_t n_train,
                                  std::size_t n_test, std::uint64_t seed, double noise) {
  SymptomSplits out;
  out.world = generate_world(n_symptoms, n_diseases, seed, noise);
  out.train = sample_dataset(out.world, n_train, mix_seed(seed, 1));
  out.test = sample_dataset(out.world, n_test, mix_seed(seed, 2));
  return out;
}

std::vector<LabeledSample> generate_skin_dataset(int per_class, std::uint64_t seed, int size,
                                                 bool augment) {
  if (per_class < 0) throw InputError("per-class count must be non-negative");
  std::vector<LabeledSample> out;
  Rng rng(mix_seed(seed, 0x736b696e));
  for (int cls = 0; cls < kSkinClasses; ++cls) {
    for (int i = 0; i < per_class; ++i) {
      Image img = render_skin_image(cls, mix_seed(seed, static_cast<std::uint64_t>(cls) * 1000003u + i), size);
      if (augment) {
        AugmentOp op;
        switch (rng.below(4)) {
          case 0: op = Rotate{static_cast<int>(30 * (1 + rng.below(11)))}; break;
          case 1: op = GaussianBlur{0.6}; break;
          case 2: op = WhiteNoise{10.0, rng.next()}; break;
          default: op = Brightness{rng.uniform(0.8, 1.2)}; break;
        }
        out.push_back({apply_op(img, op), cls});
      }
      out.push_back({std::move(img), cls});
    }
  }
  shuffle(out, rng);
  return out;
}

Dataset to_dataset(std::span<const LabeledSample> samples, int classes) {
  Dataset data;
  data.classes = classes;
  if (samples.empty()) return data;
  auto features_of = [](const LabeledSample& s) {
    if (const auto* v = std::get_if<SymptomVector>(&s.input)) return *v;
    return image_features(std::get<Image>(s.input));
  };
  const auto first = features_of(samples[0]);
  data.features.resize(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(first.size()));
  data.labels.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto f = i == 0 ? first : features_of(samples[i]);
    if (f.size() != first.size()) throw DimensionError("samples have differing feature sizes");
    if (samples[i].label < 0 || samples[i].label >= classes) {
      throw InputError("label " + std::to_string(samples[i].label) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    data.features.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const RowVectorX<float>>(f.data(), static_cast<Eigen::Index>(f.size()));
    data.labels.push_back(samples[i].label);
  }
  return data;
}

}  // namespace mededge
