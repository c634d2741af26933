#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ehrgpt/model.hpp"
#include "ehrgpt/sequencer.hpp"

namespace ehrgpt {

struct TrainConfig {
    std::size_t batch_size = 32;
    double learning_rate = 3e-4;
    double epsilon = 1e-8;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    std::size_t epochs = 2;
    std::uint64_t seed = 0;
    std::size_t threads = 1;  // >1: data-parallel, not bitwise identical to the serial run
    std::size_t max_steps = 0;  // 0 = no cap

    void validate() const;
};

/// Decoupled-weight-decay Adam (PyTorch AdamW form):
///   w <- w * (1 - lr * wd)
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   w <- w - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
struct AdamState {
    std::vector<float> m;
    std::vector<float> v;
    std::uint64_t step = 0;
};

/// Single-scalar reference step, used by tests and for documentation.
double adamw_scalar_step(double w, double g, double& m, double& v, std::uint64_t t, double lr, double beta1,
                         double beta2, double eps, double weight_decay);

class AdamW {
public:
    AdamW(const TrainConfig& config, std::size_t parameter_count);
    AdamW(const TrainConfig& config, AdamState state);

    /// Weight decay applies only to tensors whose spec marks `decay`.
    void step(std::span<float> params, std::span<const float> grads, const std::vector<TensorSpec>& layout);

    const AdamState& state() const { return state_; }

private:
    TrainConfig config_;
    AdamState state_;
};

/// Throws NumericError naming the first tensor holding a non-finite gradient.
template <class T>
void check_finite_gradients(std::span<const T> grads, const std::vector<TensorSpec>& layout) {
    for (const auto& spec : layout) {
        for (std::size_t i = 0; i < spec.size(); ++i) {
            if (!std::isfinite(static_cast<double>(grads[spec.offset + i]))) {
                throw NumericError("non-finite gradient in tensor " + spec.name);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: text header, then raw little-endian float32 tensors in layout
// order, then (optionally) the AdamW first and second moments.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
    Transformer<float> model;
    std::uint64_t step = 0;
    std::optional<AdamState> optimizer;
};

void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(std::istream& in);
/// Atomic: written to a sibling temp file, then renamed.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct StepLoss {
    std::uint64_t step = 0;
    std::size_t epoch = 0;
    double loss = 0.0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<StepLoss> losses;
};

/// "step,epoch,loss" with shortest round-trip doubles.
void write_loss_csv(std::ostream& out, std::span<const StepLoss> losses);

/// Next-token training over encoded sequences. Batch order is a seeded
/// shuffle per epoch; dropout draws come from per-sequence seeded streams.
/// When `out_dir` is given, writes epoch-<k>.ckpt and loss.csv after every
/// epoch. On a non-finite loss or gradient, writes last-good.ckpt (if out_dir)
/// and throws NumericError.
TrainResult train(std::span<const TokenSequence> dataset, const ModelConfig& model_config,
                  const TrainConfig& train_config, const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  std::optional<Checkpoint> resume = std::nullopt);

/// Mean next-token loss of one sequence under the model, dropout disabled.
double sequence_loss(const Transformer<float>& model, std::span<const TokenId> tokens);

}  // namespace ehrgpt
