// deepthink: command line front end.
//
//   deepthink init-random --out model.dtwt
//   deepthink think --model M --task sst2 --dataset D --out DIR
//   deepthink eval  --model M --task sst2 --dataset D (--kv DIR/kv.dtkv | --sweep 15) --out DIR
//   deepthink ablate-momentum --model M --task sst2 --dataset D --out DIR
//   deepthink check-golden --model M --golden G
//   deepthink run --manifest DIR/manifest.json
//
// Exit codes: 0 ok, 1 other failure, 2 usage, 3 bad file format, 4 numeric divergence.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "deepthink/all.hpp"

namespace fs = std::filesystem;
using dt::json;

namespace {

struct Options {
    std::string model, dataset, demos, task, kv, golden, out = ".", manifest, score_mode = "sum-log-prob";
    std::size_t shots = 1, steps = 15, sweep = 0, threads = 1;
    std::uint64_t seed = 0;
    float eta = 0.01f, beta = 0.9f;
    std::optional<std::size_t> position_offset;
    double tol = 1e-3;

    // init-random
    std::size_t layers = 2, heads = 2, d_model = 32, ffn = 128, max_positions = 1024, vocab = 256;
    float scale = 0.3f;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw dt::IoError("cannot write " + p.string());
    out << text;
    if (!out) throw dt::IoError("short write to " + p.string());
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// The manifest stores the exact argument vector, so `run` replays the
// command through the same parser.
void write_manifest(const Options& o, const std::string& command, const std::vector<std::string>& argv) {
    json eval = {{"shots", o.shots}, {"seed", o.seed}, {"score_mode", o.score_mode},
                 {"sweep", o.sweep}, {"threads", o.threads}};
    if (o.position_offset) eval["position_offset"] = *o.position_offset;
    const json m = {{"command", command},
                    {"argv", argv},
                    {"model", o.model},
                    {"task", o.task},
                    {"dataset", o.dataset},
                    {"demos", o.demos},
                    {"eval", eval},
                    {"think", {{"steps", o.steps}, {"eta", o.eta}, {"beta", o.beta}}},
                    {"out", o.out},
                    {"created_at", utc_now()}};
    write_text(fs::path(o.out) / "manifest.json", m.dump(2) + "\n");
}

struct Prepared {
    dt::LoadedModel model;
    const dt::TaskSpec* task{nullptr};
    std::vector<dt::TaskExample> dataset;
    dt::RenderedDemos demos;
    std::vector<dt::TokenId> demo_tokens;
    bool demos_from_dataset{false};
};

std::vector<dt::TaskExample> without(const std::vector<dt::TaskExample>& all,
                                     const std::vector<std::size_t>& drop) {
    std::set<std::size_t> d(drop.begin(), drop.end());
    std::vector<dt::TaskExample> out;
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (!d.count(i)) out.push_back(all[i]);
    }
    return out;
}

// Loads the model and task and, unless `need_demos` is false, renders the
// demonstrations. Without --demos they are sampled from the dataset itself.
Prepared prepare(const Options& o, bool need_dataset, bool need_demos) {
    if (o.model.empty()) throw CLI::RequiredError("--model");
    if (o.task.empty()) throw CLI::RequiredError("--task");
    Prepared p;
    p.model = dt::load_model(o.model);
    p.task = &dt::get_task(o.task);
    if (need_dataset && o.dataset.empty()) throw CLI::RequiredError("--dataset");
    if (!o.dataset.empty()) p.dataset = dt::load_dataset(o.dataset);
    if (!need_demos) return p;
    std::vector<dt::TaskExample> pool;
    if (!o.demos.empty()) {
        pool = dt::load_dataset(o.demos);
    } else if (!o.dataset.empty()) {
        pool = p.dataset;
        p.demos_from_dataset = true;
    } else {
        throw CLI::RequiredError("--demos or --dataset");
    }
    p.demos = dt::render_demos(*p.task, pool, o.shots, o.seed);
    p.demo_tokens = dt::encode_demos(*p.task, p.demos, p.model.tokenizer);
    return p;
}

std::vector<dt::EncodedExample> encode_all(const Prepared& p, const std::vector<dt::TaskExample>& exs) {
    std::vector<dt::EncodedExample> out;
    for (const auto& ex : exs) out.push_back(dt::encode_example(*p.task, ex, p.model.tokenizer));
    if (out.empty()) throw dt::DataError("no evaluation examples left after removing demonstrations");
    return out;
}

dt::ThinkConfig think_config(const Options& o, std::size_t steps) {
    dt::ThinkConfig tc;
    tc.steps = steps;
    tc.eta = o.eta;
    tc.beta = o.beta;
    return tc;
}

dt::EvalConfig eval_config(const Options& o) {
    dt::EvalConfig ec;
    ec.n_shot = o.shots;
    ec.seed = o.seed;
    ec.mode = dt::parse_score_mode(o.score_mode);
    ec.position_offset = o.position_offset;
    ec.threads = o.threads;
    if (o.sweep) ec.sweep_steps = o.sweep;
    return ec;
}

std::string trace_csv(const std::vector<dt::GradTrace>& traces) {
    std::string csv = "step,layer,grad_norm_k,grad_norm_v\n";
    for (const auto& t : traces) {
        csv += std::to_string(t.step) + "," + std::to_string(t.layer) + "," + fmt("%.9g", t.grad_norm_k) +
               "," + fmt("%.9g", t.grad_norm_v) + "\n";
    }
    return csv;
}

int cmd_init_random(const Options& o) {
    dt::ModelConfig cfg;
    cfg.n_layers = o.layers;
    cfg.n_heads = o.heads;
    cfg.d_model = o.d_model;
    cfg.ffn_hidden = o.ffn;
    cfg.max_positions = o.max_positions;
    cfg.vocab_size = o.vocab;
    const auto w = dt::random_weights(cfg, o.seed, o.scale);
    dt::save_model(w, dt::Tokenizer::bytes(), o.out);
    std::cout << o.out << " fingerprint " << dt::fingerprint(w).hex() << "\n";
    return 0;
}

int cmd_think(const Options& o, const std::vector<std::string>& argv) {
    const Prepared p = prepare(o, false, true);
    const dt::ThinkResult r = dt::deep_think(p.model.weights, p.demo_tokens, think_config(o, o.steps));
    fs::create_directories(o.out);
    const json extra = {{"demo_tokens", p.demo_tokens},
                        {"demo_indices", p.demos.indices},
                        {"demos_from_dataset", p.demos_from_dataset},
                        {"dataset", o.dataset.empty() ? "" : fs::absolute(o.dataset).lexically_normal().string()},
                        {"task", o.task},
                        {"shots", o.shots},
                        {"seed", o.seed},
                        {"eta", o.eta},
                        {"beta", o.beta},
                        {"steps", o.steps}};
    dt::save_kv(r.final, p.model.fingerprint, fs::path(o.out) / "kv.dtkv", extra);
    write_text(fs::path(o.out) / "gradtrace.csv", trace_csv(r.traces));
    write_manifest(o, "think", argv);
    std::cout << "demo tokens " << p.demo_tokens.size() << ", steps " << r.final.step << "\n";
    return 0;
}

std::string report_csv(const dt::EvalReport& rep, double vanilla) {
    std::string csv = "t,accuracy\n";
    for (const auto& s : rep.per_step) csv += std::to_string(s.t) + "," + fmt("%.6f", s.accuracy) + "\n";
    const auto& c = rep.cost;
    csv += "vanilla," + fmt("%.6f", vanilla) + "\n";
    csv += "best_t," + std::to_string(rep.best_t) + "\n";
    csv += "best_accuracy," + fmt("%.6f", rep.best_accuracy) + "\n";
    csv += "tokens_per_example_ours," + fmt("%.4f", c.tokens_per_example_ours) + "\n";
    csv += "tokens_per_example_baseline," + fmt("%.4f", c.tokens_per_example_baseline) + "\n";
    csv += "attention_elements_ours," + std::to_string(c.attention_elements_ours) + "\n";
    csv += "attention_elements_baseline," + std::to_string(c.attention_elements_baseline) + "\n";
    csv += "attention_ratio," + fmt("%.6f", c.attention_ratio()) + "\n";
    return csv;
}

int cmd_eval(const Options& o, const std::vector<std::string>& argv) {
    if (o.kv.empty() == (o.sweep == 0)) throw CLI::ValidationError("eval", "give exactly one of --kv and --sweep");
    const dt::EvalConfig ec = eval_config(o);
    dt::EvalReport rep;
    double vanilla = 0.0;
    if (o.sweep) {
        const Prepared p = prepare(o, true, true);
        const auto exs = encode_all(p, p.demos_from_dataset ? without(p.dataset, p.demos.indices) : p.dataset);
        rep = dt::evaluate_sweep(p.model.weights, p.demo_tokens, exs, ec, think_config(o, o.sweep));
        vanilla = rep.vanilla_accuracy.value_or(0.0);
    } else {
        const Prepared p = prepare(o, true, false);
        const dt::KVArchive ka = dt::load_kv_archive(o.kv);
        if (ka.fingerprint != p.model.fingerprint) {
            throw dt::CompatibilityError(o.kv + ": fingerprint " + ka.fingerprint.hex() +
                                         " does not match model fingerprint " + p.model.fingerprint.hex());
        }
        ka.state.validate(p.model.weights.config);
        std::vector<dt::TaskExample> pool = p.dataset;
        const std::string here = fs::absolute(o.dataset).lexically_normal().string();
        if (ka.extra.value("demos_from_dataset", false) && ka.extra.value("dataset", "") == here) {
            pool = without(p.dataset, ka.extra.at("demo_indices").get<std::vector<std::size_t>>());
        }
        const auto exs = encode_all(p, pool);
        dt::ThinkResult think;
        think.final = ka.state;
        rep = dt::evaluate(p.model.weights, think, exs, ec);
        const auto demo = ka.extra.at("demo_tokens").get<std::vector<dt::TokenId>>();
        if (demo.size() != ka.state.len()) throw dt::FormatError(o.kv + ": demo_tokens disagree with state length");
        vanilla = dt::evaluate_concatenated(p.model.weights, demo, exs, ec).accuracy;
    }
    fs::create_directories(o.out);
    write_text(fs::path(o.out) / "report.csv", report_csv(rep, vanilla));
    write_manifest(o, "eval", argv);
    std::cout << "examples " << rep.example_count << ", vanilla " << fmt("%.4f", vanilla) << ", best "
              << fmt("%.4f", rep.best_accuracy) << " at t=" << rep.best_t << "\n";
    return 0;
}

int cmd_ablate(const Options& o, const std::vector<std::string>& argv) {
    const Prepared p = prepare(o, true, true);
    const auto exs = encode_all(p, p.demos_from_dataset ? without(p.dataset, p.demos.indices) : p.dataset);
    dt::EvalConfig ec = eval_config(o);
    ec.sweep_steps = o.sweep ? o.sweep : o.steps;
    struct Arm {
        std::string name;
        float beta;
        dt::EvalReport rep;
    };
    std::vector<Arm> arms{{"momentum", o.beta, {}}, {"no_momentum", 0.0f, {}}};
    for (auto& a : arms) {
        dt::ThinkConfig tc = think_config(o, ec.sweep_steps);
        tc.beta = a.beta;
        a.rep = dt::evaluate_sweep(p.model.weights, p.demo_tokens, exs, ec, tc);
    }
    std::string csv = "config,beta,best_accuracy,step_to_peak\n";
    for (const auto& a : arms)
        csv += a.name + "," + fmt("%g", a.beta) + "," + fmt("%.6f", a.rep.best_accuracy) + "," +
               std::to_string(a.rep.best_t) + "\n";
    std::string steps = "t,accuracy_momentum,accuracy_no_momentum\n";
    for (std::size_t i = 0; i < arms[0].rep.per_step.size(); ++i)
        steps += std::to_string(arms[0].rep.per_step[i].t) + "," + fmt("%.6f", arms[0].rep.per_step[i].accuracy) +
                 "," + fmt("%.6f", arms[1].rep.per_step[i].accuracy) + "\n";
    fs::create_directories(o.out);
    write_text(fs::path(o.out) / "ablation.csv", csv);
    write_text(fs::path(o.out) / "ablation_steps.csv", steps);
    write_manifest(o, "ablate-momentum", argv);
    std::cout << csv;
    return 0;
}

int cmd_check_golden(const Options& o) {
    if (o.golden.empty()) throw CLI::RequiredError("--golden");
    const dt::LoadedModel m = dt::load_model(o.model);
    const auto recs = dt::load_golden(o.golden, m.tokenizer);
    if (recs.empty()) throw dt::DataError(o.golden + ": no records");
    float worst = 0.0f;
    for (const auto& r : recs) {
        const float d = dt::golden_max_abs_diff(m.weights, r);
        worst = std::max(worst, d);
        std::cout << fmt("%.3e", d) << "  " << r.prompt.substr(0, 60) << "\n";
    }
    std::cout << recs.size() << " prompts, max |diff| " << fmt("%.3e", worst) << " (tol " << fmt("%g", o.tol)
              << ")\n";
    return worst <= o.tol ? 0 : 1;
}

int dispatch(const std::vector<std::string>& args);

int cmd_run(const Options& o) {
    std::ifstream in(o.manifest);
    if (!in) throw dt::IoError("cannot open manifest " + o.manifest);
    json m;
    try {
        m = json::parse(in);
    } catch (const json::exception& e) {
        throw dt::FormatError(o.manifest + ": " + e.what());
    }
    if (!m.contains("argv") || !m["argv"].is_array()) throw dt::FormatError(o.manifest + ": no argv");
    return dispatch(m["argv"].get<std::vector<std::string>>());
}

void add_common(CLI::App* c, Options& o, bool demos) {
    c->add_option("--model", o.model, "model archive (DTWT)");
    c->add_option("--task", o.task, "task id")->check(CLI::IsMember([] {
        std::vector<std::string> names;
        for (const auto& [n, _] : dt::builtin_tasks()) names.push_back(n);
        return names;
    }()));
    c->add_option("--dataset", o.dataset, "JSONL dataset");
    c->add_option("--out", o.out, "output directory");
    c->add_option("--threads", o.threads, "evaluation workers")->check(CLI::PositiveNumber);
    if (!demos) return;
    c->add_option("--demos", o.demos, "JSONL demonstration pool (default: sample from --dataset)");
    c->add_option("--shots", o.shots, "demonstrations per class")->check(CLI::PositiveNumber);
    c->add_option("--seed", o.seed, "demonstration sampling seed");
    c->add_option("--eta", o.eta, "step size");
    c->add_option("--beta", o.beta, "momentum");
    c->add_option("--steps", o.steps, "thinking steps T")->check(CLI::PositiveNumber);
}

int dispatch(const std::vector<std::string>& args) {
    Options o;
    CLI::App app{"deepthink: forward-pass optimisation of demonstration key/values"};
    app.require_subcommand(1);

    auto* init = app.add_subcommand("init-random", "write a randomly initialised byte-level model");
    init->add_option("--out", o.out)->required();
    init->add_option("--seed", o.seed);
    init->add_option("--layers", o.layers);
    init->add_option("--heads", o.heads);
    init->add_option("--d-model", o.d_model);
    init->add_option("--ffn", o.ffn);
    init->add_option("--max-positions", o.max_positions);
    init->add_option("--vocab", o.vocab);
    init->add_option("--scale", o.scale);

    auto* think = app.add_subcommand("think", "run the thinking stage, store the KV state");
    add_common(think, o, true);

    auto* eval = app.add_subcommand("eval", "evaluate a stored state or sweep T");
    add_common(eval, o, true);
    eval->add_option("--kv", o.kv, "KV archive from `think`");
    eval->add_option("--sweep", o.sweep, "evaluate every t in 1..T")->check(CLI::PositiveNumber);
    eval->add_option("--score-mode", o.score_mode)->check(CLI::IsMember({"sum-log-prob", "sum-prob"}));
    eval->add_option("--position-offset", o.position_offset, "query position offset (default: demo length)");

    auto* ablate = app.add_subcommand("ablate-momentum", "compare beta against beta=0");
    add_common(ablate, o, true);
    ablate->add_option("--sweep", o.sweep, "steps to sweep (default: --steps)")->check(CLI::PositiveNumber);
    ablate->add_option("--score-mode", o.score_mode)->check(CLI::IsMember({"sum-log-prob", "sum-prob"}));

    auto* golden = app.add_subcommand("check-golden", "compare final logits with a reference file");
    golden->add_option("--model", o.model)->required();
    golden->add_option("--golden", o.golden)->required();
    golden->add_option("--tol", o.tol);

    auto* run = app.add_subcommand("run", "replay a manifest");
    run->add_option("--manifest", o.manifest)->required();

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (*init) return cmd_init_random(o);
    if (*think) return cmd_think(o, args);
    if (*eval) return cmd_eval(o, args);
    if (*ablate) return cmd_ablate(o, args);
    if (*golden) return cmd_check_golden(o);
    return cmd_run(o);
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv + 1, argv + argc);
    try {
        return dispatch(args);
    } catch (const CLI::Error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const dt::ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const dt::NumericDivergence& e) {
        std::cerr << "numeric divergence: " << e.what() << "\n";
        return 4;
    } catch (const dt::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 3;
    } catch (const dt::CorruptionError& e) {
        std::cerr << "corrupt file: " << e.what() << "\n";
        return 3;
    } catch (const dt::CompatibilityError& e) {
        std::cerr << "incompatible file: " << e.what() << "\n";
        return 3;
    } catch (const dt::ParseError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
