#include "ehrgpt/train.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/io.hpp"
#include "ehrgpt/rng.hpp"

namespace ehrgpt {

void TrainConfig::validate() const {
    if (batch_size == 0) {
        throw ConfigError("batch_size must be >= 1");
    }
    if (!(learning_rate > 0.0) || !(epsilon > 0.0)) {
        throw ConfigError("learning_rate and epsilon must be positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("betas must lie in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) {
        throw ConfigError("weight_decay must be >= 0");
    }
    if (epochs == 0) {
        throw ConfigError("epochs must be >= 1");
    }
    if (threads == 0) {
        throw ConfigError("threads must be >= 1");
    }
}

double adamw_scalar_step(double w, double g, double& m, double& v, std::uint64_t t, double lr, double beta1,
                         double beta2, double eps, double weight_decay) {
    w *= 1.0 - lr * weight_decay;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    const double m_hat = m / (1.0 - std::pow(beta1, static_cast<double>(t)));
    const double v_hat = v / (1.0 - std::pow(beta2, static_cast<double>(t)));
    return w - lr * m_hat / (std::sqrt(v_hat) + eps);
}

AdamW::AdamW(const TrainConfig& config, std::size_t parameter_count) : config_(config) {
    state_.m.assign(parameter_count, 0.0f);
    state_.v.assign(parameter_count, 0.0f);
}

AdamW::AdamW(const TrainConfig& config, AdamState state) : config_(config), state_(std::move(state)) {}

void AdamW::step(std::span<float> params, std::span<const float> grads, const std::vector<TensorSpec>& layout) {
    if (params.size() != state_.m.size() || grads.size() != params.size()) {
        throw Error("AdamW: parameter/gradient/state sizes differ");
    }
    ++state_.step;
    const double t = static_cast<double>(state_.step);
    const double bc1 = 1.0 - std::pow(config_.beta1, t);
    const double bc2 = 1.0 - std::pow(config_.beta2, t);
    const float b1 = static_cast<float>(config_.beta1);
    const float b2 = static_cast<float>(config_.beta2);
    const float step_size = static_cast<float>(config_.learning_rate / bc1);
    const float bc2_sqrt = static_cast<float>(std::sqrt(bc2));
    const float eps = static_cast<float>(config_.epsilon);
    const float decay = static_cast<float>(1.0 - config_.learning_rate * config_.weight_decay);
    for (const auto& spec : layout) {
        const bool apply_decay = spec.decay && config_.weight_decay != 0.0;
        for (std::size_t i = spec.offset; i < spec.offset + spec.size(); ++i) {
            const float g = grads[i];
            if (apply_decay) {
                params[i] *= decay;
            }
            state_.m[i] = b1 * state_.m[i] + (1.0f - b1) * g;
            state_.v[i] = b2 * state_.v[i] + (1.0f - b2) * g * g;
            params[i] -= step_size * state_.m[i] / (std::sqrt(state_.v[i]) / bc2_sqrt + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

std::string format_double(double x) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, r.ptr);
}

void write_floats(std::ostream& out, std::span<const float> values) {
    std::string bytes(values.size() * 4, '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto u = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) {
            bytes[4 * i + b] = static_cast<char>((u >> (8 * b)) & 0xFFu);
        }
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void read_floats(std::istream& in, std::span<float> values) {
    std::string bytes(values.size() * 4, '\0');
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
        throw DataError("checkpoint truncated");
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) {
            u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
        }
        values[i] = std::bit_cast<float>(u);
    }
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint) {
    const ModelConfig& c = checkpoint.model.config();
    out << "ehrgpt-checkpoint " << kCheckpointFormatVersion << '\n'
        << "d_model " << c.d_model << '\n'
        << "n_layers " << c.n_layers << '\n'
        << "n_heads " << c.n_heads << '\n'
        << "context " << c.context << '\n'
        << "vocab_size " << c.vocab_size << '\n'
        << "dropout " << format_double(c.dropout) << '\n'
        << "seed " << c.seed << '\n'
        << "init_std " << format_double(c.init_std) << '\n'
        << "step " << checkpoint.step << '\n'
        << "parameters " << checkpoint.model.parameters().size() << '\n'
        << "optimizer " << (checkpoint.optimizer ? checkpoint.optimizer->step : 0) << ' '
        << (checkpoint.optimizer ? 1 : 0) << '\n'
        << "end\n";
    write_floats(out, checkpoint.model.parameters());
    if (checkpoint.optimizer) {
        write_floats(out, checkpoint.optimizer->m);
        write_floats(out, checkpoint.optimizer->v);
    }
    if (!out) {
        throw DataError("checkpoint write failed");
    }
}

Checkpoint read_checkpoint(std::istream& in) {
    std::string line;
    auto next = [&](std::string_view key) {
        if (!std::getline(in, line)) {
            throw DataError("checkpoint header truncated before '" + std::string(key) + "'");
        }
        std::istringstream fields(line);
        std::string k;
        fields >> k;
        if (k != key) {
            throw DataError("checkpoint header: expected '" + std::string(key) + "', found '" + k + "'");
        }
        std::string rest;
        std::getline(fields >> std::ws, rest);
        return rest;
    };
    auto as_size = [](const std::string& s) {
        std::size_t v = 0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc{}) {
            throw DataError("checkpoint header: bad integer '" + s + "'");
        }
        return v;
    };
    auto as_double = [](const std::string& s) {
        double v = 0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc{}) {
            throw DataError("checkpoint header: bad number '" + s + "'");
        }
        return v;
    };
    if (as_size(next("ehrgpt-checkpoint")) != static_cast<std::size_t>(kCheckpointFormatVersion)) {
        throw DataError("unsupported checkpoint version");
    }
    ModelConfig c;
    c.d_model = as_size(next("d_model"));
    c.n_layers = as_size(next("n_layers"));
    c.n_heads = as_size(next("n_heads"));
    c.context = as_size(next("context"));
    c.vocab_size = as_size(next("vocab_size"));
    c.dropout = as_double(next("dropout"));
    c.seed = as_size(next("seed"));
    c.init_std = as_double(next("init_std"));
    Checkpoint ckpt;
    ckpt.step = as_size(next("step"));
    const std::size_t n_params = as_size(next("parameters"));
    std::istringstream opt(next("optimizer"));
    std::uint64_t opt_step = 0;
    int has_opt = 0;
    opt >> opt_step >> has_opt;
    next("end");
    try {
        ckpt.model = Transformer<float>(c);
    } catch (const ConfigError& e) {
        throw DataError(std::string("checkpoint config invalid: ") + e.what());
    }
    if (ckpt.model.parameters().size() != n_params) {
        throw DataError("checkpoint parameter count does not match its config");
    }
    read_floats(in, ckpt.model.parameters());
    for (float x : ckpt.model.parameters()) {
        if (!std::isfinite(x)) {
            throw DataError("checkpoint holds non-finite parameters");
        }
    }
    if (has_opt) {
        AdamState s;
        s.step = opt_step;
        s.m.resize(n_params);
        s.v.resize(n_params);
        read_floats(in, s.m);
        read_floats(in, s.v);
        ckpt.optimizer = std::move(s);
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    atomic_write(path, [&](std::ostream& out) { write_checkpoint(out, checkpoint); }, true);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open checkpoint " + path.string());
    }
    return read_checkpoint(in);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

void write_loss_csv(std::ostream& out, std::span<const StepLoss> losses) {
    out << "step,epoch,loss\n";
    for (const auto& l : losses) {
        out << l.step << ',' << l.epoch << ',' << format_double(l.loss) << '\n';
    }
}

double sequence_loss(const Transformer<float>& model, std::span<const TokenId> tokens) {
    if (tokens.size() < 2) {
        throw DataError("sequence_loss needs at least two tokens");
    }
    Activations<float> acts;
    model.forward(acts, tokens.first(tokens.size() - 1), 0);
    return lm_loss<float>(acts.logits, tokens.subspan(1), {}, model.config().vocab_size);
}

namespace {

struct Worker {
    Activations<float> acts;
    std::vector<float> dlogits;
    std::vector<float> grads;
    std::vector<double> loss_sums;  // per sequence, in batch order
};

// Forward + backward of batch members [lo, hi), accumulating into w.grads.
void run_chunk(const Transformer<float>& model, std::span<const TokenSequence* const> batch, std::size_t lo,
               std::size_t hi, float weight, std::uint64_t first_sequence, const TrainConfig& tc, Worker& w) {
    const std::size_t V = model.config().vocab_size;
    for (std::size_t b = lo; b < hi; ++b) {
        const auto& ids = batch[b]->token_ids;
        const std::size_t n = ids.size() - 1;
        const std::span<const TokenId> inputs(ids.data(), n);
        const std::span<const TokenId> targets(ids.data() + 1, n);
        Rng rng(tc.seed, "dropout", first_sequence + b);
        model.forward(w.acts, inputs, 0, DropoutPlan{model.config().dropout, &rng});
        w.dlogits.assign(n * V, 0.0f);
        w.loss_sums[b] = cross_entropy_sum<float>(w.acts.logits, targets, {}, V, w.dlogits, weight);
        model.backward(w.acts, w.dlogits, w.grads);
    }
}

void write_epoch_outputs(const std::filesystem::path& dir, const Checkpoint& ckpt, std::size_t epoch,
                         std::span<const StepLoss> losses) {
    save_checkpoint(ckpt, dir / ("epoch-" + std::to_string(epoch) + ".ckpt"));
    atomic_write(dir / "loss.csv", [&](std::ostream& out) { write_loss_csv(out, losses); });
}

}  // namespace

TrainResult train(std::span<const TokenSequence> dataset, const ModelConfig& model_config,
                  const TrainConfig& train_config, const std::optional<std::filesystem::path>& out_dir,
                  std::optional<Checkpoint> resume) {
    train_config.validate();
    std::vector<const TokenSequence*> usable;
    for (const auto& s : dataset) {
        if (s.token_ids.size() >= 2) {
            usable.push_back(&s);
        }
    }
    if (usable.empty()) {
        throw DataError("training dataset has no sequence with at least two tokens");
    }

    TrainResult result;
    if (resume) {
        result.checkpoint = std::move(*resume);
    } else {
        result.checkpoint.model = Transformer<float>(model_config);
        result.checkpoint.model.init_random(derive_seed(model_config.seed, "init"));
    }
    Transformer<float>& model = result.checkpoint.model;
    const std::size_t V = model.config().vocab_size;
    for (const auto* s : usable) {
        if (s->token_ids.size() > model.config().context + 1) {
            throw DataError("sequence for patient " + s->patient_id + " exceeds the model context");
        }
        for (TokenId id : s->token_ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= V) {
                throw DataError("sequence for patient " + s->patient_id + " holds a token outside the vocabulary");
            }
        }
    }

    const std::size_t P = model.parameters().size();
    AdamW optimizer = result.checkpoint.optimizer ? AdamW(train_config, *result.checkpoint.optimizer)
                                                  : AdamW(train_config, P);
    const std::size_t n_threads = std::min(train_config.threads, train_config.batch_size);
    std::vector<Worker> workers(n_threads);
    for (auto& w : workers) {
        w.grads.assign(P, 0.0f);
        w.loss_sums.assign(train_config.batch_size, 0.0);
    }

    std::uint64_t step = result.checkpoint.step;
    std::uint64_t sequence_counter = step * train_config.batch_size;
    std::vector<std::size_t> order(usable.size());
    bool capped = false;
    for (std::size_t epoch = 0; epoch < train_config.epochs && !capped; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(train_config.seed, "batch-order", epoch);
        shuffle_rng.shuffle(order.begin(), order.end());
        for (std::size_t start = 0; start < order.size(); start += train_config.batch_size) {
            if (train_config.max_steps != 0 && step >= train_config.max_steps) {
                capped = true;
                break;
            }
            const std::size_t bsz = std::min(train_config.batch_size, order.size() - start);
            std::vector<const TokenSequence*> batch(bsz);
            std::size_t n_targets = 0;
            for (std::size_t b = 0; b < bsz; ++b) {
                batch[b] = usable[order[start + b]];
                n_targets += batch[b]->token_ids.size() - 1;
            }
            const float weight = 1.0f / static_cast<float>(n_targets);
            for (auto& w : workers) {
                std::fill(w.grads.begin(), w.grads.end(), 0.0f);
            }
            if (n_threads == 1) {
                run_chunk(model, batch, 0, bsz, weight, sequence_counter, train_config, workers[0]);
            } else {
                std::vector<std::thread> pool;
                const std::size_t per = (bsz + n_threads - 1) / n_threads;
                for (std::size_t t = 0; t < n_threads; ++t) {
                    const std::size_t lo = std::min(bsz, t * per);
                    const std::size_t hi = std::min(bsz, lo + per);
                    pool.emplace_back([&, lo, hi, t] {
                        run_chunk(model, batch, lo, hi, weight, sequence_counter, train_config, workers[t]);
                    });
                }
                for (auto& th : pool) {
                    th.join();
                }
                for (std::size_t t = 1; t < n_threads; ++t) {
                    for (std::size_t i = 0; i < P; ++i) {
                        workers[0].grads[i] += workers[t].grads[i];
                    }
                }
            }
            double loss_sum = 0.0;
            const std::size_t per = (bsz + n_threads - 1) / n_threads;
            for (std::size_t b = 0; b < bsz; ++b) {
                loss_sum += workers[b / per].loss_sums[b];
            }
            const double loss = loss_sum / static_cast<double>(n_targets);
            sequence_counter += bsz;

            try {
                if (!std::isfinite(loss)) {
                    throw NumericError("non-finite training loss at step " + std::to_string(step + 1));
                }
                check_finite_gradients<float>(workers[0].grads, model.layout());
            } catch (const NumericError&) {
                if (out_dir) {
                    Checkpoint good{model, step, optimizer.state()};
                    save_checkpoint(good, *out_dir / "last-good.ckpt");
                    atomic_write(*out_dir / "loss.csv", [&](std::ostream& out) { write_loss_csv(out, result.losses); });
                }
                throw;
            }
            optimizer.step(model.parameters(), workers[0].grads, model.layout());
            ++step;
            result.losses.push_back(StepLoss{step, epoch + 1, loss});
        }
        result.checkpoint.step = step;
        result.checkpoint.optimizer = optimizer.state();
        if (out_dir) {
            write_epoch_outputs(*out_dir, result.checkpoint, epoch + 1, result.losses);
        }
    }
    result.checkpoint.step = step;
    result.checkpoint.optimizer = optimizer.state();
    return result;
}

}  // namespace ehrgpt
