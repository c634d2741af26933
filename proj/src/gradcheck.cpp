#include "ehrgpt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/rng.hpp"

namespace ehrgpt {

std::vector<TensorCheck> GradCheckReport::worst(std::size_t count) const {
    std::vector<TensorCheck> sorted = tensors;
    std::stable_sort(sorted.begin(), sorted.end(), [](const TensorCheck& a, const TensorCheck& b) {
        return a.max_relative_error > b.max_relative_error;
    });
    sorted.resize(std::min(count, sorted.size()));
    return sorted;
}

double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

GradCheckReport grad_check(ModelConfig config, const GradCheckOptions& options) {
    if (config.n_layers > 2 || config.d_model > 16 || config.vocab_size > 11 || config.context > 12) {
        throw ConfigError("grad_check runs on tiny configs only (<= 2 layers, d_model 16, vocab 11, context 12)");
    }
    config.dropout = 0.0;
    config.init_std = options.init_std;
    Transformer<double> model(config);
    model.init_random(derive_seed(options.seed, "gradcheck-init"));

    const std::size_t length = options.sequence_length == 0 ? config.context : options.sequence_length;
    if (length < 1 || length > config.context) {
        throw ConfigError("grad_check sequence_length outside [1, context]");
    }
    Rng rng(options.seed, "gradcheck-data");
    std::vector<TokenId> inputs(length), targets(length);
    for (std::size_t t = 0; t < length; ++t) {
        inputs[t] = static_cast<TokenId>(rng.uniform_int(0, static_cast<std::int64_t>(config.vocab_size) - 1));
        targets[t] = static_cast<TokenId>(rng.uniform_int(0, static_cast<std::int64_t>(config.vocab_size) - 1));
    }
    const std::size_t V = config.vocab_size;
    const double weight = 1.0 / static_cast<double>(length);

    Activations<double> acts;
    model.forward(acts, inputs, 0);
    std::vector<double> dlogits(acts.logits.size(), 0.0);
    cross_entropy_sum<double>(acts.logits, targets, {}, V, dlogits, weight);
    std::vector<double> grads(model.parameters().size(), 0.0);
    model.backward(acts, dlogits, grads);

    auto loss_at = [&]() {
        Activations<double> a;
        model.forward(a, inputs, 0);
        return lm_loss<double>(a.logits, targets, {}, V);
    };

    GradCheckReport report;
    auto& params = model.parameters();
    Rng pick(options.seed, "gradcheck-coords");
    for (const auto& spec : model.layout()) {
        TensorCheck tc;
        tc.name = spec.name;
        std::vector<std::size_t> coords(spec.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords.size() > options.samples_per_tensor) {
            pick.shuffle(coords.begin(), coords.end());
            coords.resize(options.samples_per_tensor);
            std::sort(coords.begin(), coords.end());
        }
        const double sign = options.corrupt_tensor && *options.corrupt_tensor == spec.name ? -1.0 : 1.0;
        for (std::size_t c : coords) {
            const std::size_t i = spec.offset + c;
            const double original = params[i];
            params[i] = original + options.step;
            const double up = loss_at();
            params[i] = original - options.step;
            const double down = loss_at();
            params[i] = original;
            const double numeric = (up - down) / (2.0 * options.step);
            const double analytic = sign * grads[i];
            const double err = relative_error(analytic, numeric);
            if (err > tc.max_relative_error || tc.sampled == 0) {
                tc.max_relative_error = err;
                tc.worst_index = c;
                tc.analytic = analytic;
                tc.numeric = numeric;
            }
            ++tc.sampled;
        }
        report.max_relative_error = std::max(report.max_relative_error, tc.max_relative_error);
        report.tensors.push_back(std::move(tc));
    }
    report.passed = report.max_relative_error < options.tolerance;
    return report;
}

}  // namespace ehrgpt
