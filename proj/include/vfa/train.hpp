#pragma once

// Loss recipes, the optimizer and the training loop.
//
// A recipe is a weighted sum of named terms evaluated on one registered
// pair:
//   ncc        ncc_loss(fixed, warped moving), window ncc_window
//   mi         mi_loss(fixed, warped moving), mi_bins bins
//   mse        mse_loss(fixed, warped moving)
//   diffusion  diffusion_reg of the final displacement
//   dice       dice_loss of the one-hot fixed labels vs linearly warped
//              one-hot moving labels, over the union of present classes
//   tre        tre_loss of the final transform at the fixed keypoints
//
// History CSV layout: one comment line "# preset=<name> terms=<t>:<w>,...",
// then the header "step,epoch,<term>...,total,beta,val_metric" and one row
// per optimizer step. val_metric is filled on the last step of an epoch
// and empty elsewhere.

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "vfa/annotations.hpp"
#include "vfa/model.hpp"

namespace vfa {

struct LossTerm {
  std::string name;
  double weight = 0.0;
};

struct LossRecipe {
  std::string preset = "custom";
  std::vector<LossTerm> terms;
  int ncc_window = 9;
  int mi_bins = 32;

  static LossRecipe from_preset(const std::string& name);
  static std::vector<std::string> preset_names();
  // "ncc:1,diffusion:1"; terms keep their order.
  static LossRecipe parse_terms(const std::string& spec);

  bool uses(const std::string& term) const;
  void set_weight(const std::string& term, double weight);
  bool needs_labels() const { return uses("dice"); }
  bool needs_keypoints() const { return uses("tre"); }
  std::string terms_string() const;
  void validate() const;
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(NamedParams<T> params, AdamConfig cfg);
  // Applies one update from the accumulated gradients, then clears them.
  void step();
  std::int64_t steps() const { return t_; }

 private:
  NamedParams<T> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

template <typename T>
struct Sample {
  std::string name;
  Var<T> fixed;   // [1, spatial...]
  Var<T> moving;
  std::optional<LabelMap> fixed_labels;
  std::optional<LabelMap> moving_labels;
  std::optional<KeypointSet> keypoints;
};

template <typename T>
struct LossValue {
  Var<T> total;
  std::vector<Var<T>> terms;  // recipe order, unweighted
  Registration<T> registration;
};

template <typename T>
LossValue<T> evaluate_loss(const VfaModel<T>& model, const Sample<T>& sample, const LossRecipe& recipe);

struct StepReport {
  std::vector<double> terms;  // recipe order, unweighted
  double total = 0.0;
  double beta = 0.0;
};

template <typename T>
StepReport train_step(VfaModel<T>& model, Adam<T>& opt, const Sample<T>& sample, const LossRecipe& recipe);

// Reverses the listed spatial axes of every image, label map and keypoint
// coordinate in the sample. Applying the same flip twice is the identity.
template <typename T>
Sample<T> flip_sample(const Sample<T>& sample, const std::vector<bool>& axes);

// Mean Dice of the nearest-neighbour warped moving labels when labels are
// present, else the mean windowed NCC of the warped pair. Higher is better.
template <typename T>
double validation_metric(const VfaModel<T>& model, const Sample<T>& sample, int ncc_window = 9);

struct TrainConfig {
  AdamConfig adam;
  LossRecipe recipe = LossRecipe::from_preset("t1-atlas");
  int epochs = 1;
  std::int64_t max_steps = 0;  // 0: no cap
  bool flip_augment = false;
  bool shuffle = true;
  std::uint64_t seed = 0;
};

struct HistoryRow {
  std::int64_t step = 0;
  int epoch = 0;
  std::vector<double> terms;
  double total = 0.0;
  double beta = 0.0;
  std::optional<double> val_metric;
};

struct History {
  LossRecipe recipe;
  std::vector<HistoryRow> rows;

  std::string header_comment() const;
  std::string header() const;
  void write_csv(std::ostream& os) const;
};

template <typename T>
struct FitResult {
  History history;
  std::vector<std::vector<T>> best_values;  // parameter values, model order
  double best_metric = 0.0;
  int best_epoch = -1;
};

// Per-step observer; return false to stop early.
using StepCallback = std::function<bool(const HistoryRow&)>;

template <typename T>
FitResult<T> fit(VfaModel<T>& model, const std::vector<Sample<T>>& train, const std::vector<Sample<T>>& validation,
                 const TrainConfig& cfg, const StepCallback& on_step = {});

template <typename T>
void load_values(const VfaModel<T>& model, const std::vector<std::vector<T>>& values);

}  // namespace vfa
