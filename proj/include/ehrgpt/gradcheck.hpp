#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ehrgpt/model.hpp"

namespace ehrgpt {

struct GradCheckOptions {
    std::size_t samples_per_tensor = 64;
    double step = 1e-5;  // central-difference h
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
    double init_std = 0.3;  // fresh random init; larger than training init to keep gradients well above round-off
    std::size_t sequence_length = 0;  // 0 = config.context
    std::optional<std::string> corrupt_tensor;  // mutation test: flip the analytic gradient's sign on this tensor
};

struct TensorCheck {
    std::string name;
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;  // within the tensor
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t sampled = 0;
};

struct GradCheckReport {
    std::vector<TensorCheck> tensors;  // layout order
    double max_relative_error = 0.0;
    bool passed = false;

    /// Tensors sorted by descending error, at most `count`.
    std::vector<TensorCheck> worst(std::size_t count = 5) const;
};

/// Relative error |a - n| / (|a| + |n| + 1e-12).
double relative_error(double analytic, double numeric);

/// Double-precision check of the analytic backward against central finite
/// differences of the mean next-token loss on a random sequence. Dropout is
/// forced off. Throws ConfigError when the config exceeds the tiny bound
/// (2 layers, d_model 16, vocab 11, context 12).
GradCheckReport grad_check(ModelConfig config, const GradCheckOptions& options = {});

}  // namespace ehrgpt
