#include "ehrgpt/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "ehrgpt/corpus.hpp"
#include "ehrgpt/errors.hpp"
#include "ehrgpt/eval.hpp"
#include "ehrgpt/forecast.hpp"
#include "ehrgpt/icd.hpp"
#include "ehrgpt/interpret.hpp"
#include "ehrgpt/io.hpp"
#include "ehrgpt/predictor.hpp"
#include "ehrgpt/probe.hpp"
#include "ehrgpt/rng.hpp"
#include "ehrgpt/sequencer.hpp"
#include "ehrgpt/train.hpp"
#include "ehrgpt/vocab.hpp"

namespace ehrgpt {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "1.0.0";

std::string normalize_key(std::string key) {
    std::replace(key.begin(), key.end(), '-', '_');
    return key;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto pos = s.find(sep, start);
        const auto piece = trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (!piece.empty()) {
            out.push_back(piece);
        }
        if (pos == std::string_view::npos) {
            break;
        }
        start = pos + 1;
    }
    return out;
}

}  // namespace

std::map<std::string, std::string> parse_config(const std::string& text) {
    std::map<std::string, std::string> values;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (body.empty()) {
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ParseError("config line is not key=value: " + body, line_no);
        }
        const std::string key = normalize_key(trim(body.substr(0, eq)));
        if (key.empty()) {
            throw ParseError("config line has an empty key", line_no);
        }
        if (values.contains(key)) {
            throw ParseError("duplicate config key '" + key + "'", line_no);
        }
        values[key] = trim(body.substr(eq + 1));
    }
    return values;
}

namespace {

// Every option of every subcommand lives here; each subcommand binds the
// subset it uses. Config keys are the option names with underscores.
struct Settings {
    std::uint64_t seed = 1;
    std::string config;
    std::string out;
    std::size_t threads = 1;

    // synth
    std::size_t n_patients = 1000;
    double visit_stop = 0.15;
    std::size_t max_visits = 40;
    double icd9_fraction = 0.1;
    std::size_t dx_pool = 60, rx_pool = 40, px_pool = 30, lab_pool = 12;
    std::vector<std::string> rules;

    // shared inputs
    std::string corpus, vocab, data, checkpoint, bigram, icd_map;
    std::string split = "train";

    // vocab / encode
    double threshold = kDefaultFrequencyThreshold;
    std::size_t context = kDefaultContext;

    // train
    std::size_t d_model = 64, n_layers = 2, n_heads = 4;
    double dropout = 0.1;
    std::size_t batch_size = 32;
    double lr = 3e-4;
    std::size_t epochs = 2;
    double weight_decay = 0.01;
    std::size_t max_steps = 0;
    std::string resume;

    // evaluation
    std::size_t budget = kDefaultTokenBudget;
    std::size_t max_patients = 0;
    std::string target, chapter, task;
    int window = 90;
    std::string n = "1,5,10,20";
    std::size_t min_history = 2;
    bool trace = false;

    // probe
    double probe_lr = 1e-4;
    std::size_t probe_epochs = 20;
    double probe_dropout = 0.1;
    std::size_t probe_batch = 32;
    std::size_t folds = 5;

    // attend / export
    int layer = -1;
    std::size_t per_step = 15;
    std::size_t report = 10;
    std::string kind = "codes";
    std::string codes;
    bool all_outcomes = false;
};

const std::vector<std::string>& subcommands() {
    static const std::vector<std::string> names{"synth",    "vocab", "encode", "train",  "eval-visits",
                                                "zeroshot", "probe", "attend", "export-embeddings"};
    return names;
}

void add_common(CLI::App& app, Settings& s, bool out_required = true) {
    app.add_option("--seed", s.seed, "Top-level seed")->capture_default_str();
    app.add_option("--config", s.config, "Flat key=value configuration file");
    auto* out = app.add_option("--out", s.out, "Output file or directory");
    if (out_required) {
        out->required();
    }
    app.add_option("--threads", s.threads, "Worker threads (1 = bitwise-deterministic path)")->capture_default_str();
}

void add_cohort_options(CLI::App& app, Settings& s) {
    app.add_option("--corpus", s.corpus, "Corpus JSONL")->required();
    app.add_option("--vocab", s.vocab, "Vocabulary file")->required();
    app.add_option("--target", s.target, "Comma-separated diagnosis categories, e.g. F32,F33,F34");
    app.add_option("--chapter", s.chapter, "ICD-10 chapter id, e.g. C00-D49");
    app.add_option("--task", s.task, "conditions | chapters | all");
    app.add_option("--window", s.window, "Prediction window in days (90 or 180)")->capture_default_str();
    app.add_option("--min-history", s.min_history, "Minimum history visits")->capture_default_str();
    app.add_option("--budget", s.budget, "Generated tokens per horizon")->capture_default_str();
    app.add_option("--split", s.split, "train | validation | test | all")->capture_default_str();
}

std::unique_ptr<CLI::App> make_app(const std::string& name, Settings& s) {
    auto app = std::make_unique<CLI::App>("ehrgpt " + name, "ehrgpt " + name);
    if (name == "synth") {
        add_common(*app, s);
        app->add_option("--n-patients", s.n_patients)->capture_default_str();
        app->add_option("--visit-stop", s.visit_stop, "Per-visit stop probability")->capture_default_str();
        app->add_option("--max-visits", s.max_visits)->capture_default_str();
        app->add_option("--icd9-fraction", s.icd9_fraction)->capture_default_str();
        app->add_option("--dx-pool", s.dx_pool)->capture_default_str();
        app->add_option("--rx-pool", s.rx_pool)->capture_default_str();
        app->add_option("--px-pool", s.px_pool)->capture_default_str();
        app->add_option("--lab-pool", s.lab_pool)->capture_default_str();
        app->add_option("--rule", s.rules,
                        "Planted rule kind:domain:precursors:target:probability[:min_gap-horizon], "
                        "precursors joined by '+'; several rules separated by ';' in a config file")
            ->delimiter(';');
    } else if (name == "vocab") {
        add_common(*app, s);
        app->add_option("--corpus", s.corpus)->required();
        app->add_option("--threshold", s.threshold, "Minimum distinct-patient share")->capture_default_str();
        app->add_option("--icd-map", s.icd_map, "ICD-9 to ICD-10 mapping (TSV)");
        app->add_option("--split", s.split, "Split the vocabulary is fitted on")->capture_default_str();
    } else if (name == "encode") {
        add_common(*app, s);
        app->add_option("--corpus", s.corpus)->required();
        app->add_option("--vocab", s.vocab)->required();
        app->add_option("--split", s.split)->capture_default_str();
        app->add_option("--context", s.context)->capture_default_str();
    } else if (name == "train") {
        add_common(*app, s);
        app->add_option("--data", s.data, "Encoded dataset")->required();
        app->add_option("--vocab", s.vocab)->required();
        app->add_option("--d-model", s.d_model)->capture_default_str();
        app->add_option("--n-layers", s.n_layers)->capture_default_str();
        app->add_option("--n-heads", s.n_heads)->capture_default_str();
        app->add_option("--context", s.context)->capture_default_str();
        app->add_option("--dropout", s.dropout)->capture_default_str();
        app->add_option("--batch-size", s.batch_size)->capture_default_str();
        app->add_option("--lr", s.lr)->capture_default_str();
        app->add_option("--epochs", s.epochs)->capture_default_str();
        app->add_option("--weight-decay", s.weight_decay)->capture_default_str();
        app->add_option("--max-steps", s.max_steps, "Stop after this many steps (0 = none)")->capture_default_str();
        app->add_option("--resume", s.resume, "Checkpoint to continue from");
    } else if (name == "eval-visits") {
        add_common(*app, s);
        app->add_option("--corpus", s.corpus)->required();
        app->add_option("--vocab", s.vocab)->required();
        app->add_option("--checkpoint", s.checkpoint);
        app->add_option("--bigram", s.bigram, "Encoded dataset for a bigram reference predictor");
        app->add_option("--split", s.split)->capture_default_str();
        app->add_option("--budget", s.budget)->capture_default_str();
        app->add_option("--max-patients", s.max_patients, "0 = all")->capture_default_str();
    } else if (name == "zeroshot") {
        add_common(*app, s);
        add_cohort_options(*app, s);
        app->add_option("--checkpoint", s.checkpoint);
        app->add_option("--bigram", s.bigram);
        app->add_option("--n", s.n, "Comma-separated N values")->capture_default_str();
        app->add_flag("--trace", s.trace, "Write per-member forecast traces");
    } else if (name == "probe") {
        add_common(*app, s);
        add_cohort_options(*app, s);
        app->add_option("--checkpoint", s.checkpoint)->required();
        app->add_option("--n", s.n)->capture_default_str();
        app->add_option("--probe-lr", s.probe_lr)->capture_default_str();
        app->add_option("--probe-epochs", s.probe_epochs)->capture_default_str();
        app->add_option("--probe-dropout", s.probe_dropout)->capture_default_str();
        app->add_option("--probe-batch", s.probe_batch)->capture_default_str();
        app->add_option("--folds", s.folds)->capture_default_str();
    } else if (name == "attend") {
        add_common(*app, s);
        add_cohort_options(*app, s);
        app->add_option("--checkpoint", s.checkpoint)->required();
        app->add_option("--layer", s.layer, "-1 = final layer")->capture_default_str();
        app->add_option("--per-step", s.per_step)->capture_default_str();
        app->add_option("--report", s.report)->capture_default_str();
    } else if (name == "export-embeddings") {
        add_common(*app, s);
        app->add_option("--checkpoint", s.checkpoint)->required();
        app->add_option("--vocab", s.vocab)->required();
        app->add_option("--kind", s.kind, "codes | patients")->capture_default_str();
        app->add_option("--codes", s.codes, "Comma-separated code filter (kind=codes)");
        app->add_option("--corpus", s.corpus);
        app->add_option("--target", s.target);
        app->add_option("--chapter", s.chapter);
        app->add_option("--window", s.window)->capture_default_str();
        app->add_option("--min-history", s.min_history)->capture_default_str();
        app->add_option("--budget", s.budget)->capture_default_str();
        app->add_option("--split", s.split)->capture_default_str();
        app->add_option("--n", s.n, "Single N used for the TP/FP labels")->capture_default_str();
        app->add_flag("--all-outcomes", s.all_outcomes, "Also export TN/FN rows");
    }
    return app;
}

std::set<std::string> option_keys(const CLI::App& app) {
    std::set<std::string> keys;
    for (const auto* opt : app.get_options()) {
        if (!opt->get_lnames().empty()) {
            keys.insert(normalize_key(opt->get_lnames().front()));
        }
    }
    return keys;
}

bool on_command_line(const std::vector<std::string>& args, const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct Manifest {
    std::string subcommand;
    Json config = Json::object();
    Json inputs = Json::object();
    Json outputs = Json::object();
    Json details = Json::object();
    std::uint64_t seed = 0;
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

    void input(const std::string& path) { inputs[path] = sha256_file(path); }
    void output(const fs::path& path) { outputs[path.string()] = sha256_file(path); }

    void write(const fs::path& path) const {
        Json j;
        j["subcommand"] = subcommand;
        j["version"] = kVersion;
        j["artifact_versions"] = {{"corpus", kCorpusFormatVersion},
                                  {"vocab", kVocabFormatVersion},
                                  {"encoded", kEncodedFormatVersion},
                                  {"checkpoint", kCheckpointFormatVersion}};
        j["seed"] = seed;
        j["config_digest"] = sha256_hex(config.dump());
        j["config"] = config;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        j["details"] = details;
        j["wall_clock_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        atomic_write(path, [&](std::ostream& out) { out << j.dump(2) << '\n'; });
    }
};

Json effective_config(const CLI::App& app) {
    Json cfg = Json::object();
    for (const auto* opt : app.get_options()) {
        if (opt->get_lnames().empty()) {
            continue;
        }
        const std::string key = normalize_key(opt->get_lnames().front());
        if (key == "config" || key == "help") {
            continue;
        }
        if (opt->count() > 0) {
            std::string joined;
            for (const auto& r : opt->results()) {
                joined += (joined.empty() ? "" : ";") + r;
            }
            cfg[key] = joined;
        } else {
            cfg[key] = opt->get_default_str();
        }
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

std::uint64_t split_seed(const Settings& s) { return derive_seed(s.seed, "split"); }

Corpus corpus_split(const Corpus& corpus, const Settings& s) {
    if (s.split == "all") {
        return corpus;
    }
    return select_split(corpus, parse_split(s.split), split_seed(s));
}

std::vector<std::size_t> parse_n_list(const std::string& text) {
    std::vector<std::size_t> ns;
    for (const auto& piece : split_list(text, ',')) {
        std::size_t v = 0;
        auto r = std::from_chars(piece.data(), piece.data() + piece.size(), v);
        if (r.ec != std::errc{} || r.ptr != piece.data() + piece.size() || v == 0) {
            throw ConfigError("bad N value '" + piece + "'");
        }
        ns.push_back(v);
    }
    if (ns.empty()) {
        throw ConfigError("--n needs at least one value");
    }
    std::sort(ns.begin(), ns.end());
    ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
    return ns;
}

PlantedRule parse_rule(const std::string& text) {
    const auto parts = split_list(text, ':');
    if (parts.size() < 5 || parts.size() > 6) {
        throw ConfigError("rule '" + text + "' is not kind:domain:precursors:target:probability[:min_gap-horizon]");
    }
    PlantedRule rule;
    if (parts[0] == "next_token") {
        rule.kind = PlantedRule::Kind::next_token;
    } else if (parts[0] == "trajectory") {
        rule.kind = PlantedRule::Kind::trajectory;
    } else {
        throw ConfigError("unknown rule kind '" + parts[0] + "'");
    }
    static const std::map<std::string, Domain> tags{{"dx", Domain::diagnosis},
                                                    {"rx", Domain::medication},
                                                    {"px", Domain::procedure},
                                                    {"lab", Domain::lab}};
    if (auto it = tags.find(parts[1]); it != tags.end()) {
        rule.domain = it->second;
    } else {
        try {
            rule.domain = parse_domain(parts[1]);
        } catch (const Error&) {
            throw ConfigError("unknown rule domain '" + parts[1] + "'");
        }
    }
    rule.precursor = split_list(parts[2], '+');
    rule.target = parts[3];
    try {
        rule.probability = std::stod(parts[4]);
    } catch (const std::exception&) {
        throw ConfigError("bad rule probability '" + parts[4] + "'");
    }
    if (parts.size() == 6) {
        const auto range = split_list(parts[5], '-');
        if (range.size() != 2) {
            throw ConfigError("rule gap must be min-max days, got '" + parts[5] + "'");
        }
        try {
            rule.min_gap_days = std::stoi(range[0]);
            rule.horizon_days = std::stoi(range[1]);
        } catch (const std::exception&) {
            throw ConfigError("bad rule gap '" + parts[5] + "'");
        }
    }
    return rule;
}

std::shared_ptr<const Transformer<float>> load_model(const std::string& path, Manifest& m) {
    m.input(path);
    auto ckpt = load_checkpoint(path);
    return std::make_shared<const Transformer<float>>(std::move(ckpt.model));
}

std::unique_ptr<Predictor> make_predictor(const Settings& s, const Vocabulary& vocab, Manifest& m) {
    if (!s.checkpoint.empty() == !s.bigram.empty()) {
        throw ConfigError("give exactly one of --checkpoint or --bigram");
    }
    if (!s.checkpoint.empty()) {
        auto model = load_model(s.checkpoint, m);
        if (model->config().vocab_size != vocab.size()) {
            throw DataError("checkpoint vocabulary size differs from the vocabulary file");
        }
        return std::make_unique<TransformerPredictor>(std::move(model));
    }
    m.input(s.bigram);
    const auto data = load_encoded(s.bigram);
    return std::make_unique<BigramPredictor>(data, vocab.size(), s.context);
}

struct TaskSpec {
    std::string name;
    std::set<std::string> codes;
    bool chapter = false;
};

std::vector<TaskSpec> resolve_tasks(const Settings& s, const Vocabulary& vocab) {
    const int chosen = (!s.target.empty() ? 1 : 0) + (!s.chapter.empty() ? 1 : 0) + (!s.task.empty() ? 1 : 0);
    if (chosen != 1) {
        throw ConfigError("choose exactly one of --target, --chapter or --task");
    }
    std::vector<TaskSpec> tasks;
    if (!s.target.empty()) {
        const auto codes = split_list(s.target, ',');
        TaskSpec t;
        for (const auto& c : codes) {
            t.name += (t.name.empty() ? "" : "+") + c;
            t.codes.insert(c);
        }
        tasks.push_back(std::move(t));
    } else if (!s.chapter.empty()) {
        tasks.push_back(TaskSpec{s.chapter, chapter_codes(vocab, s.chapter), true});
    } else {
        if (s.task != "conditions" && s.task != "chapters" && s.task != "all") {
            throw ConfigError("--task must be conditions, chapters or all");
        }
        if (s.task != "chapters") {
            for (const auto& c : condition_tasks()) {
                tasks.push_back(TaskSpec{c.name, {c.codes.begin(), c.codes.end()}, false});
            }
        }
        if (s.task != "conditions") {
            for (const auto& ch : icd_chapters()) {
                if (ch.evaluated) {
                    tasks.push_back(TaskSpec{std::string(ch.id), chapter_codes(vocab, ch.id), true});
                }
            }
        }
    }
    if (s.window <= 0) {
        throw ConfigError("--window must be positive");
    }
    return tasks;
}

// Cohort for one task; with several tasks an unbuildable cohort is skipped
// and noted instead of failing the whole run.
std::optional<CohortSpec> cohort_for(const TaskSpec& task, const Corpus& corpus, const Vocabulary& vocab,
                                     const Settings& s, bool tolerate, Json& skipped, std::ostream& err) {
    try {
        if (task.chapter && task.codes.empty()) {
            throw ConfigError("chapter " + task.name + " has no vocabulary codes");
        }
        return build_cohort(corpus, vocab, task.codes, s.window, s.min_history, task.name);
    } catch (const Error& e) {
        if (!tolerate) {
            throw;
        }
        skipped[task.name] = e.what();
        err << "skip " << task.name << ": " << e.what() << '\n';
        return std::nullopt;
    }
}

Json cohort_json(const CohortSpec& c) {
    return Json{{"targets", std::vector<std::string>(c.target_codes.begin(), c.target_codes.end())},
                {"missing_codes", c.missing_codes},
                {"window_days", c.window_days},
                {"min_history_visits", c.min_history_visits},
                {"positives", c.positives()},
                {"negatives", c.negatives()},
                {"excluded_positive_history", c.excluded_positive_history},
                {"excluded_negative_history", c.excluded_negative_history}};
}

std::string file_stem(const std::string& task, int window) {
    std::string stem = task;
    std::replace(stem.begin(), stem.end(), '/', '_');
    return stem + "_w" + std::to_string(window);
}

std::string fmt(double x) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, r.ptr);
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void cmd_synth(const Settings& s, Manifest& m, std::ostream& out) {
    GeneratorConfig g;
    g.n_patients = s.n_patients;
    g.seed = derive_seed(s.seed, "synth");
    g.visit_stop_probability = s.visit_stop;
    g.max_visits = s.max_visits;
    g.icd9_fraction = s.icd9_fraction;
    g.pools[0].size = s.dx_pool;
    g.pools[1].size = s.rx_pool;
    g.pools[2].size = s.px_pool;
    g.pools[3].size = s.lab_pool;
    for (const auto& r : s.rules) {
        g.planted_rules.push_back(parse_rule(r));
    }
    const Corpus corpus = generate_corpus(g);
    save_corpus(corpus, s.out);
    m.output(s.out);
    m.details["patients"] = corpus.size();
    out << "wrote " << corpus.size() << " patients to " << s.out << '\n';
}

void cmd_vocab(const Settings& s, Manifest& m, std::ostream& out) {
    m.input(s.corpus);
    const Corpus corpus = corpus_split(load_corpus(s.corpus), s);
    VocabularyOptions opts;
    opts.frequency_threshold = s.threshold;
    if (!s.icd_map.empty()) {
        m.input(s.icd_map);
        opts.icd_mapping = load_icd_mapping(s.icd_map);
    }
    const Vocabulary vocab = Vocabulary::build(corpus, opts);
    vocab.save(s.out);
    m.output(s.out);
    m.details["fit_patients"] = corpus.size();
    m.details["tokens"] = vocab.size();
    m.details["warnings"] = vocab.warnings();
    out << "vocabulary of " << vocab.size() << " tokens from " << corpus.size() << " patients\n";
}

void cmd_encode(const Settings& s, Manifest& m, std::ostream& out) {
    m.input(s.corpus);
    m.input(s.vocab);
    const Corpus corpus = corpus_split(load_corpus(s.corpus), s);
    const Vocabulary vocab = Vocabulary::load(s.vocab);
    std::vector<TokenSequence> sequences;
    std::size_t skipped = 0;
    for (const auto& p : corpus) {
        if (p.visits.empty()) {
            ++skipped;
            continue;
        }
        sequences.push_back(encode_patient(p, vocab, std::nullopt, s.context));
    }
    save_encoded(sequences, s.out);
    m.output(s.out);
    m.details["sequences"] = sequences.size();
    m.details["skipped_empty"] = skipped;
    out << "encoded " << sequences.size() << " sequences\n";
}

void cmd_train(const Settings& s, Manifest& m, std::ostream& out) {
    m.input(s.data);
    m.input(s.vocab);
    const auto data = load_encoded(s.data);
    const Vocabulary vocab = Vocabulary::load(s.vocab);
    if (data.empty()) {
        throw DataError("training dataset " + s.data + " is empty");
    }
    ModelConfig mc{s.d_model, s.n_layers, s.n_heads, s.context, vocab.size(), s.dropout, derive_seed(s.seed, "model"),
                   0.02};
    mc.validate(vocab.special_count());
    TrainConfig tc;
    tc.batch_size = s.batch_size;
    tc.learning_rate = s.lr;
    tc.epochs = s.epochs;
    tc.weight_decay = s.weight_decay;
    tc.seed = derive_seed(s.seed, "train");
    tc.threads = s.threads;
    tc.max_steps = s.max_steps;
    std::optional<Checkpoint> resume;
    if (!s.resume.empty()) {
        m.input(s.resume);
        resume = load_checkpoint(s.resume);
    }
    const fs::path dir(s.out);
    const TrainResult result = train(data, mc, tc, dir, std::move(resume));
    save_checkpoint(result.checkpoint, dir / "model.ckpt");
    for (std::size_t e = 1; e <= tc.epochs; ++e) {
        const fs::path p = dir / ("epoch-" + std::to_string(e) + ".ckpt");
        if (fs::exists(p)) {
            m.output(p);
        }
    }
    m.output(dir / "loss.csv");
    m.output(dir / "model.ckpt");
    m.details["steps"] = result.checkpoint.step;
    m.details["parameters"] = result.checkpoint.model.parameters().size();
    m.details["final_loss"] = result.losses.empty() ? 0.0 : result.losses.back().loss;
    out << "trained " << result.checkpoint.step << " steps, final loss "
        << (result.losses.empty() ? 0.0 : result.losses.back().loss) << '\n';
}

void cmd_eval_visits(const Settings& s, Manifest& m, std::ostream& out) {
    m.input(s.corpus);
    m.input(s.vocab);
    const Vocabulary vocab = Vocabulary::load(s.vocab);
    Corpus corpus = corpus_split(load_corpus(s.corpus), s);
    if (s.max_patients != 0 && corpus.size() > s.max_patients) {
        corpus.resize(s.max_patients);
    }
    const auto predictor = make_predictor(s, vocab, m);
    const auto results = evaluate_visits(*predictor, corpus, vocab, s.budget, s.threads);
    const AggregateMetrics agg = aggregate_metrics(results);
    const fs::path dir(s.out);
    atomic_write(dir / "visits.csv", [&](std::ostream& o) {
        o << "patient_id,visit,precision,recall,true_positives,predicted,actual\n";
        for (const auto& p : results) {
            for (const auto& v : p.visits) {
                o << p.patient_id << ',' << v.visit_index << ',' << fmt(v.precision) << ',' << fmt(v.recall) << ','
                  << v.true_positives << ',' << v.predicted.size() << ',' << v.actual.size() << '\n';
            }
        }
    });
    atomic_write(dir / "summary.csv", [&](std::ostream& o) {
        o << "scope,visits,precision,recall\n";
        o << "all," << agg.visits << ',' << fmt(agg.mean_precision) << ',' << fmt(agg.mean_recall) << '\n';
        for (const auto& [d, score] : agg.by_domain) {
            o << to_string(d) << ',' << agg.domain_visits.at(d) << ',' << fmt(score.precision) << ','
              << fmt(score.recall) << '\n';
        }
    });
    m.output(dir / "visits.csv");
    m.output(dir / "summary.csv");
    m.details["patients"] = agg.patients;
    m.details["visits"] = agg.visits;
    m.details["skipped_single_visit"] = agg.skipped_single_visit;
    m.details["skipped_empty_truth"] = agg.skipped_empty_truth;
    out << "visits " << agg.visits << " precision " << agg.mean_precision << " recall " << agg.mean_recall << '\n';
}

void cmd_zeroshot(const Settings& s, Manifest& m, std::ostream& out, std::ostream& err) {
    m.input(s.corpus);
    m.input(s.vocab);
    const Vocabulary vocab = Vocabulary::load(s.vocab);
    const Corpus corpus = corpus_split(load_corpus(s.corpus), s);
    const auto ns = parse_n_list(s.n);
    const auto predictor = make_predictor(s, vocab, m);
    const auto tasks = resolve_tasks(s, vocab);
    const bool tolerate = tasks.size() > 1;
    const fs::path dir(s.out);
    Json cohorts = Json::object(), skipped = Json::object();
    m.details["horizon_rule"] =
        "a member is predicted positive at N when a target is in any step's top-N set along the greedy path, "
        "generated until the accumulated time-token lower bound exceeds the window";
    for (const auto& task : tasks) {
        auto cohort = cohort_for(task, corpus, vocab, s, tolerate, skipped, err);
        if (!cohort) {
            continue;
        }
        const ZeroShotResult r = zero_shot_eval(*predictor, corpus, vocab, *cohort, ns, s.budget, s.threads);
        const std::string stem = file_stem(task.name, s.window);
        atomic_write(dir / (stem + ".csv"), [&](std::ostream& o) { write_confusion_csv(o, r.counts); });
        atomic_write(dir / (stem + "_outcomes.csv"), [&](std::ostream& o) {
            o << "patient_id,label,cutoff";
            for (std::size_t n : ns) {
                o << ",pred@" << n;
            }
            o << '\n';
            for (const auto& oc : r.outcomes) {
                const auto& mem = cohort->members[oc.member];
                o << mem.patient_id << ',' << (mem.positive ? 1 : 0) << ',' << mem.cutoff.iso();
                for (std::size_t k = 0; k < ns.size(); ++k) {
                    o << ',' << (oc.evaluated ? (oc.predicted[k] ? "1" : "0") : "NA");
                }
                o << '\n';
            }
        });
        m.output(dir / (stem + ".csv"));
        m.output(dir / (stem + "_outcomes.csv"));
        if (s.trace) {
            for (const auto& oc : r.outcomes) {
                if (!oc.evaluated) {
                    continue;
                }
                const fs::path p = dir / "traces" / (stem + "_" + cohort->members[oc.member].patient_id + ".csv");
                atomic_write(p, [&](std::ostream& o) { write_trace(o, oc.forecast, vocab); });
            }
        }
        Json cj = cohort_json(*cohort);
        cj["encode_failures"] = r.failures;
        cohorts[task.name] = cj;
        const auto& top = r.counts.rows.back();
        out << task.name << ": positives " << r.counts.positives << " negatives " << r.counts.negatives << " TP@"
            << top.n << ' ' << top.tp_pct << "% FP@" << top.n << ' ' << top.fp_pct << "%\n";
    }
    m.details["cohorts"] = cohorts;
    m.details["skipped_tasks"] = skipped;
    if (cohorts.empty()) {
        throw DataError("no zero-shot task could be evaluated");
    }
}

void cmd_probe(const Settings& s, Manifest& m, std::ostream& out, std::ostream& err) {
    m.input(s.corpus);
    m.input(s.vocab);
    const Vocabulary vocab = Vocabulary::load(s.vocab);
    const Corpus corpus = corpus_split(load_corpus(s.corpus), s);
    const auto ns = parse_n_list(s.n);
    const std::string digest_before = sha256_file(s.checkpoint);
    auto model = load_model(s.checkpoint, m);
    TransformerPredictor backbone(model);
    const auto tasks = resolve_tasks(s, vocab);
    const bool tolerate = tasks.size() > 1;
    ProbeConfig pc;
    pc.learning_rate = s.probe_lr;
    pc.epochs = s.probe_epochs;
    pc.dropout = s.probe_dropout;
    pc.batch_size = s.probe_batch;
    pc.seed = derive_seed(s.seed, "probe");
    std::vector<ProbeReportRow> rows;
    Json cohorts = Json::object(), skipped = Json::object();
    for (const auto& task : tasks) {
        auto cohort = cohort_for(task, corpus, vocab, s, tolerate, skipped, err);
        if (!cohort) {
            continue;
        }
        const ZeroShotResult zs = zero_shot_eval(backbone, corpus, vocab, *cohort, ns, s.budget, s.threads);
        // Both arms see the same members and the same truncated histories.
        std::vector<std::vector<float>> features;
        std::vector<int> labels;
        std::vector<const MemberOutcome*> kept;
        for (const auto& oc : zs.outcomes) {
            if (!oc.evaluated) {
                continue;
            }
            const auto& mem = cohort->members[oc.member];
            const auto history = encode_patient(corpus[mem.corpus_index], vocab, mem.cutoff, backbone.context());
            features.push_back(patient_embedding(backbone, history.token_ids));
            labels.push_back(mem.positive ? 1 : 0);
            kept.push_back(&oc);
        }
        const auto scores = cross_fit_scores(features, labels, pc, s.folds);
        const double auc = roc_auc(scores, labels);
        for (std::size_t k = 0; k < ns.size(); ++k) {
            const ConfusionRow& zrow = zs.counts.rows[k];
            ProbeReportRow row;
            row.task = task.name;
            row.n = ns[k];
            row.fp_budget = zrow.fp;
            row.tp_zero_shot = zrow.tp;
            row.tp_probe = matched_fp_tp(scores, labels, zrow.fp);
            row.positives = zs.counts.positives;
            row.negatives = zs.counts.negatives;
            row.auc = auc;
            rows.push_back(row);
        }
        cohorts[task.name] = cohort_json(*cohort);
        out << task.name << ": probe AUC " << auc << '\n';
    }
    if (rows.empty()) {
        throw DataError("no probe task could be evaluated");
    }
    const fs::path dir(s.out);
    atomic_write(dir / "probe_report.csv", [&](std::ostream& o) { write_probe_report(o, rows); });
    m.output(dir / "probe_report.csv");
    const std::string digest_after = sha256_file(s.checkpoint);
    m.details["backbone_digest_before"] = digest_before;
    m.details["backbone_digest_after"] = digest_after;
    m.details["cohorts"] = cohorts;
    m.details["skipped_tasks"] = skipped;
    m.details["probe"] = {{"learning_rate", pc.learning_rate}, {"epochs", pc.epochs},     {"dropout", pc.dropout},
                          {"batch_size", pc.batch_size},       {"folds", s.folds},        {"patience", pc.patience},
                          {"validation_fraction", pc.validation_fraction}};
    if (digest_before != digest_after) {
        throw NumericError("backbone checkpoint changed during probe training");
    }
}

void cmd_attend(const Settings& s, Manifest& m, std::ostream& out, std::ostream& err) {
    m.input(s.corpus);
    m.input(s.vocab);
    const Vocabulary vocab = Vocabulary::load(s.vocab);
    const Corpus corpus = corpus_split(load_corpus(s.corpus), s);
    auto model = load_model(s.checkpoint, m);
    TransformerPredictor predictor(model);
    const auto tasks = resolve_tasks(s, vocab);
    const bool tolerate = tasks.size() > 1;
    AttributionOptions opts;
    if (s.layer >= 0) {
        opts.layer = static_cast<std::size_t>(s.layer);
    }
    opts.per_step = s.per_step;
    opts.report = s.report;
    opts.budget = s.budget;
    const fs::path dir(s.out);
    Json reports = Json::object(), skipped = Json::object();
    for (const auto& task : tasks) {
        auto cohort = cohort_for(task, corpus, vocab, s, tolerate, skipped, err);
        if (!cohort) {
            continue;
        }
        const AttributionReport report = attribute(predictor, corpus, vocab, *cohort, opts);
        const fs::path p = dir / ("attribution_" + file_stem(task.name, s.window) + ".csv");
        atomic_write(p, [&](std::ostream& o) { write_attribution_csv(o, report, vocab); });
        m.output(p);
        reports[task.name] = {{"layer", report.layer},
                              {"patients", report.patients},
                              {"patients_fired", report.patients_fired},
                              {"firing_steps", report.firing_steps},
                              {"empty", report.empty()}};
        out << task.name << ": " << report.firing_steps << " firing steps"
            << (report.empty() ? " (target never fired)" : "") << '\n';
    }
    m.details["attribution"] = reports;
    m.details["skipped_tasks"] = skipped;
    m.details["attention"] = "self-attention of the chosen layer at the emitting position, mean over heads, "
                             "restricted to history positions";
}

void cmd_export(const Settings& s, Manifest& m, std::ostream& out, std::ostream& err) {
    m.input(s.vocab);
    const Vocabulary vocab = Vocabulary::load(s.vocab);
    auto model = load_model(s.checkpoint, m);
    EmbeddingTable table;
    if (s.kind == "codes") {
        std::set<std::string> filter;
        for (const auto& c : split_list(s.codes, ',')) {
            filter.insert(c);
        }
        table = export_code_embeddings(*model, vocab, filter);
        atomic_write(s.out, [&](std::ostream& o) { write_embedding_csv(o, table, "code", "chapter"); });
    } else if (s.kind == "patients") {
        if (s.corpus.empty()) {
            throw ConfigError("--kind patients needs --corpus");
        }
        m.input(s.corpus);
        const Corpus corpus = corpus_split(load_corpus(s.corpus), s);
        const auto ns = parse_n_list(s.n);
        if (ns.size() != 1) {
            throw ConfigError("--kind patients takes a single --n");
        }
        Settings single = s;
        single.task.clear();
        const auto tasks = resolve_tasks(single, vocab);
        Json skipped = Json::object();
        auto cohort = cohort_for(tasks.front(), corpus, vocab, s, false, skipped, err);
        TransformerPredictor predictor(model);
        const ZeroShotResult zs = zero_shot_eval(predictor, corpus, vocab, *cohort, ns, s.budget, s.threads);
        table = export_patient_embeddings(predictor, corpus, vocab, *cohort, zs, ns.front(), !s.all_outcomes);
        atomic_write(s.out, [&](std::ostream& o) { write_embedding_csv(o, table, "patient_id", "outcome"); });
        m.details["cohort"] = cohort_json(*cohort);
    } else {
        throw ConfigError("--kind must be codes or patients");
    }
    m.output(s.out);
    m.details["rows"] = table.rows.size();
    m.details["excluded"] = table.excluded;
    m.details["warnings"] = table.warnings;
    for (const auto& w : table.warnings) {
        err << "warning: " << w << '\n';
    }
    out << "exported " << table.rows.size() << " rows\n";
}

void print_usage(std::ostream& out) {
    out << "usage: ehrgpt <subcommand> [options]\n\nsubcommands:\n";
    for (const auto& name : subcommands()) {
        out << "  " << name << '\n';
    }
    out << "\ncommon options: --seed, --config <file>, --out <path>, --threads\n"
           "run 'ehrgpt <subcommand> --help' for the options of one subcommand\n";
}

fs::path manifest_path(const std::string& subcommand, const std::string& out) {
    static const std::set<std::string> file_outputs{"synth", "vocab", "encode", "export-embeddings"};
    if (file_outputs.contains(subcommand)) {
        return fs::path(out + ".manifest.json");
    }
    return fs::path(out) / "manifest.json";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    if (args.empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help") {
        print_usage(args.empty() ? err : out);
        return args.empty() ? kExitUsage : kExitOk;
    }
    const std::string name = args[0];
    if (std::find(subcommands().begin(), subcommands().end(), name) == subcommands().end()) {
        err << "unknown subcommand '" << name << "'\n";
        print_usage(err);
        return kExitUsage;
    }
    std::vector<std::string> rest(args.begin() + 1, args.end());
    Settings settings;
    auto app = make_app(name, settings);
    try {
        // Config values fill in options the command line leaves unset.
        std::string config_path;
        for (std::size_t i = 0; i < rest.size(); ++i) {
            if (rest[i] == "--config" && i + 1 < rest.size()) {
                config_path = rest[i + 1];
            } else if (rest[i].rfind("--config=", 0) == 0) {
                config_path = rest[i].substr(9);
            }
        }
        if (!config_path.empty()) {
            const auto values = parse_config(read_file(config_path));
            std::set<std::string> known;
            for (const auto& sub : subcommands()) {
                Settings scratch;
                const auto keys = option_keys(*make_app(sub, scratch));
                known.insert(keys.begin(), keys.end());
            }
            const auto mine = option_keys(*app);
            for (const auto& [key, value] : values) {
                if (!known.contains(key)) {
                    throw ConfigError("unknown config key '" + key + "' in " + config_path);
                }
                if (!mine.contains(key) || key == "config") {
                    continue;
                }
                std::string flag = "--" + key;
                std::replace(flag.begin(), flag.end(), '_', '-');
                if (!on_command_line(rest, flag)) {
                    rest.push_back(flag + "=" + value);
                }
            }
        }
        std::vector<std::string> reversed(rest.rbegin(), rest.rend());
        app->parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app->help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ParseError& e) {
        err << "config error (line " << e.line() << "): " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const DataError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }

    Manifest manifest;
    manifest.subcommand = name;
    manifest.seed = settings.seed;
    manifest.config = effective_config(*app);
    try {
        if (settings.threads == 0) {
            throw ConfigError("--threads must be >= 1");
        }
        for (const std::string* path : {&settings.corpus, &settings.vocab, &settings.data, &settings.checkpoint,
                                        &settings.bigram, &settings.icd_map, &settings.resume}) {
            if (!path->empty() && !fs::is_regular_file(*path)) {
                throw ConfigError("input file not found: " + *path);
            }
        }
        if (!settings.config.empty()) {
            manifest.input(settings.config);
        }
        if (name == "synth") {
            cmd_synth(settings, manifest, out);
        } else if (name == "vocab") {
            cmd_vocab(settings, manifest, out);
        } else if (name == "encode") {
            cmd_encode(settings, manifest, out);
        } else if (name == "train") {
            cmd_train(settings, manifest, out);
        } else if (name == "eval-visits") {
            cmd_eval_visits(settings, manifest, out);
        } else if (name == "zeroshot") {
            cmd_zeroshot(settings, manifest, out, err);
        } else if (name == "probe") {
            cmd_probe(settings, manifest, out, err);
        } else if (name == "attend") {
            cmd_attend(settings, manifest, out, err);
        } else {
            cmd_export(settings, manifest, out, err);
        }
        manifest.write(manifest_path(name, settings.out));
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitData;
    }
}

}  // namespace ehrgpt
