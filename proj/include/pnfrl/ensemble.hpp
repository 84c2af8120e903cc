#ifndef PNFRL_ENSEMBLE_HPP_
#define PNFRL_ENSEMBLE_HPP_

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pnfrl/diffcore.hpp"
#include "pnfrl/envdata.hpp"
#include "pnfrl/rng.hpp"

namespace pnfrl {

enum class UncertaintyMode {
  kDisagreementMaxDev,  // max_i |mean_i - mean_bar|
  kAleatoricMaxStd,     // max_i |std_i|
  kStdOfMeans,          // |elementwise std over members of mean_i|
};

UncertaintyMode parse_uncertainty_mode(std::string_view name);
std::string uncertainty_mode_name(UncertaintyMode mode);

// Per-dimension affine map: normalized = (raw - shift) / scale.
struct Normalizer {
  std::vector<double> shift;
  std::vector<double> scale;

  static Normalizer identity(size_t dim);
  // column mean and standard deviation; near-constant columns get scale 1
  static Normalizer fit(const Tensor& data);
  size_t dim() const { return shift.size(); }
  void normalize(Tensor& t) const;
  bool operator==(const Normalizer&) const = default;
};

class EnsembleFitError : public std::runtime_error {
 public:
  EnsembleFitError(const std::string& what, size_t member)
      : std::runtime_error(what), member_(member) {}
  size_t member() const { return member_; }

 private:
  size_t member_;
};

// M Gaussian-head MLPs over normalized (s, a). Each member outputs
// 2 * (dS + 1) values: the normalized mean of [ds, r] followed by the raw
// log-variance, clamped to [kMinLogVar, kMaxLogVar] on use.
struct DynamicsEnsemble {
  static constexpr double kMinLogVar = -10.0;
  static constexpr double kMaxLogVar = 2.0;

  size_t state_dim = 0;
  size_t action_dim = 0;
  std::vector<MlpParams> members;
  Normalizer input;   // over [s, a]
  Normalizer output;  // over [ds, r]

  size_t out_dim() const { return state_dim + 1; }
  size_t size() const { return members.size(); }
};

// Assembles an ensemble from explicit members and checks the invariants
// (shapes, M >= 2 unless allow_single, positive scales).
DynamicsEnsemble make_ensemble(size_t state_dim, size_t action_dim,
                               std::vector<MlpParams> members,
                               Normalizer input, Normalizer output,
                               bool allow_single = false);

struct EnsembleCfg {
  size_t n_members = 5;
  std::vector<size_t> hidden = {128, 128, 128};
  double lr = 1e-3;
  size_t batch_size = 256;
  int max_epochs = 200;
  int patience = 5;
  bool bootstrap = true;
  uint64_t seed = 0;
  // train members on separate threads; results do not depend on this
  bool parallel = true;
};

struct MemberFitReport {
  int epochs_run = 0;
  int best_epoch = 0;
  double best_val_nll = 0.0;
  double final_val_nll = 0.0;
};

struct EnsembleFit {
  DynamicsEnsemble model;
  std::vector<MemberFitReport> reports;
};

// Maximum-likelihood fit with early stopping on validation NLL; each member
// returns to its best-validation parameters.
EnsembleFit fit_ensemble(const Dataset& train, const Dataset& val,
                         const EnsembleCfg& cfg);

// Member outputs for a batch in normalized output space.
struct NormalizedPrediction {
  std::vector<Tensor> mean;    // per member, [batch, dS + 1]
  std::vector<Tensor> logvar;  // per member, clamped
};

NormalizedPrediction predict_normalized(const DynamicsEnsemble& model,
                                        const Tensor& states,
                                        const Tensor& actions);

struct MemberPrediction {
  std::vector<double> mean;  // raw units, [ds, r]
  std::vector<double> std;
};

std::vector<MemberPrediction> predict_members(const DynamicsEnsemble& model,
                                              std::span<const double> s,
                                              std::span<const double> a);

// Gaussian NLL (without the log 2 pi constant), mean over rows and dims of
// normalized targets.
double gaussian_nll(const DynamicsEnsemble& model, size_t member,
                    const Tensor& inputs_norm, const Tensor& targets_norm);

struct ModelStep {
  std::vector<double> s_next;
  double r = 0.0;
};

// Picks one member uniformly and samples its Gaussian; s_next = s + ds.
ModelStep sample_transition(const DynamicsEnsemble& model,
                            std::span<const double> s,
                            std::span<const double> a, Rng& rng);
std::vector<ModelStep> sample_transitions(const DynamicsEnsemble& model,
                                          const Tensor& states,
                                          const Tensor& actions, Rng& rng);

double uncertainty(const DynamicsEnsemble& model, std::span<const double> s,
                   std::span<const double> a, UncertaintyMode mode);
std::vector<double> uncertainty_batch(const DynamicsEnsemble& model,
                                      const Tensor& states,
                                      const Tensor& actions,
                                      UncertaintyMode mode);
std::vector<double> uncertainty_from_prediction(
    const NormalizedPrediction& pred, UncertaintyMode mode);

// Mean absolute difference between the ensemble-mean prediction of
// (s_next, r) and the ground-truth step, over dS + 1 outputs.
double true_model_error(const DynamicsEnsemble& model, const EnvSpec& spec,
                        std::span<const double> s, std::span<const double> a);

// Directory with member_<i>.pnf checkpoints and normalizer.txt.
void save_ensemble(const std::filesystem::path& dir,
                   const DynamicsEnsemble& model);
DynamicsEnsemble load_ensemble(const std::filesystem::path& dir);

// Builds [batch, dim] tensors from transitions.
Tensor stack_states(const std::vector<Transition>& batch);
Tensor stack_actions(const std::vector<Transition>& batch);
Tensor stack_rows(const std::vector<std::vector<double>>& rows);

}  // namespace pnfrl

#endif  // PNFRL_ENSEMBLE_HPP_
