#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "deepthink/deepthink.hpp"
#include "deepthink/tokenizer.hpp"

namespace dt {

enum class TaskKind { Classification, MultipleChoice };

inline std::string to_string(TaskKind k) {
    return k == TaskKind::Classification ? "classification" : "multiple_choice";
}

// A prompt is context + answer. Demonstrations render the gold answer;
// queries stop after the context and each candidate answer is scored.
struct PromptSpec {
    std::string id;
    TaskKind kind{TaskKind::Classification};
    std::string context_template;  // {query} | {query_a} | {query_b}
    std::string answer_template;   // {label} (classification) | {choice}, {query_b}
    std::vector<std::string> verbalizers;
    std::string separator{"\n\n"};

    void validate() const {
        const std::set<std::string> ctx{"query", "query_a", "query_b"};
        const std::set<std::string> ans = kind == TaskKind::Classification
                                              ? std::set<std::string>{"label"}
                                              : std::set<std::string>{"choice", "query_b"};
        for (const auto& p : placeholders(context_template)) {
            if (!ctx.count(p)) throw ConfigError(id + ": unbound placeholder {" + p + "} in context");
        }
        for (const auto& p : placeholders(answer_template)) {
            if (!ans.count(p)) throw ConfigError(id + ": unbound placeholder {" + p + "} in answer");
        }
        if (kind == TaskKind::Classification) {
            if (verbalizers.empty()) throw ConfigError(id + ": empty verbalizer set");
            std::set<std::string> uniq(verbalizers.begin(), verbalizers.end());
            if (uniq.size() != verbalizers.size()) throw ConfigError(id + ": duplicate verbalizer");
        }
    }

    static std::vector<std::string> placeholders(const std::string& tpl) {
        std::vector<std::string> out;
        for (std::size_t i = tpl.find('{'); i != std::string::npos; i = tpl.find('{', i + 1)) {
            const auto close = tpl.find('}', i);
            if (close == std::string::npos) throw ConfigError("unterminated placeholder in " + tpl);
            out.push_back(tpl.substr(i + 1, close - i - 1));
        }
        return out;
    }
};

struct TaskSpec {
    std::string name;
    TaskKind kind{TaskKind::Classification};
    std::vector<PromptSpec> prompts;

    const PromptSpec& prompt(const std::string& template_id) const {
        for (const auto& p : prompts) {
            if (p.id == template_id) return p;
        }
        throw DataError("template '" + template_id + "' does not belong to task " + name);
    }
};

inline const std::map<std::string, TaskSpec>& builtin_tasks() {
    static const std::map<std::string, TaskSpec> tasks = [] {
        std::map<std::string, TaskSpec> m;
        auto cls = [&](const std::string& name, const std::string& in, const std::string& out,
                       std::vector<std::string> labels) {
            PromptSpec p{name, TaskKind::Classification, in + ": {query}\n" + out + ":", " {label}",
                         std::move(labels)};
            p.validate();
            m[name] = TaskSpec{name, TaskKind::Classification, {p}};
        };
        cls("sst2", "Review", "Sentiment", {"negative", "positive"});
        cls("sst5", "Review", "Sentiment", {"terrible", "negative", "neutral", "positive", "great"});
        cls("trec", "Question", "Type",
            {"Abbreviation", "Entity", "Description", "Person", "Location", "Number"});
        cls("mr", "Review", "Sentiment", {"negative", "positive"});
        cls("agnews", "Article", "Category", {"World", "Sports", "Business", "Technology"});

        auto mc = [&](const std::string& name, std::vector<PromptSpec> prompts) {
            for (auto& p : prompts) {
                p.kind = TaskKind::MultipleChoice;
                p.validate();
            }
            m[name] = TaskSpec{name, TaskKind::MultipleChoice, std::move(prompts)};
        };
        mc("copa", {PromptSpec{"copa_cause", {}, "{query} because", " {choice}", {}},
                    PromptSpec{"copa_effect", {}, "{query} therefore", " {choice}", {}}});
        mc("openbookqa", {PromptSpec{"openbookqa", {}, "{query}", " {choice}", {}}});
        mc("winogrande", {PromptSpec{"winogrande", {}, "{query_a}", " {choice} {query_b}", {}}});
        mc("qasc", {PromptSpec{"qasc", {}, "{query}", " {choice}", {}}});
        mc("hellaswag", {PromptSpec{"hellaswag", {}, "{query}", " {choice}", {}}});
        return m;
    }();
    return tasks;
}

inline const TaskSpec& get_task(const std::string& name) {
    const auto& tasks = builtin_tasks();
    auto it = tasks.find(name);
    if (it == tasks.end()) throw ConfigError("unknown task '" + name + "'");
    return it->second;
}

struct TaskExample {
    TaskKind kind{TaskKind::Classification};
    std::map<std::string, std::string> fields;  // query | query_a, query_b
    std::vector<std::string> choices;
    std::size_t label{0};
    std::string template_id;
};

// One JSON object per line:
//   {"kind":"classification","query":"...","label":1,"template_id":"sst2"}
//   {"kind":"multiple_choice","query":"...","choices":["a","b"],"label":0,"template_id":"copa_cause"}
// WinoGrande-style records carry query_a/query_b instead of query.
inline TaskExample parse_example(const std::string& line, std::size_t lineno) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(lineno, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(lineno, "record is not an object");
    auto str = [&](const char* key) -> std::optional<std::string> {
        if (!j.contains(key)) return std::nullopt;
        if (!j[key].is_string()) throw ParseError(lineno, std::string("field ") + key + " is not a string");
        return j[key].get<std::string>();
    };
    TaskExample ex;
    const auto kind = str("kind");
    if (!kind) throw ParseError(lineno, "missing kind");
    if (*kind == "classification") {
        ex.kind = TaskKind::Classification;
    } else if (*kind == "multiple_choice" || *kind == "multiple-choice") {
        ex.kind = TaskKind::MultipleChoice;
    } else {
        throw ParseError(lineno, "unknown kind '" + *kind + "'");
    }
    if (!j.contains("label")) throw ParseError(lineno, "missing label");
    if (!j["label"].is_number_unsigned()) throw ParseError(lineno, "label must be a non-negative integer");
    ex.label = j["label"].get<std::size_t>();
    const auto tid = str("template_id");
    if (!tid) throw ParseError(lineno, "missing template_id");
    ex.template_id = *tid;

    for (const char* key : {"query", "query_a", "query_b"}) {
        if (auto v = str(key)) ex.fields[key] = *v;
    }
    const bool has_query = ex.fields.count("query");
    const bool has_pair = ex.fields.count("query_a") && ex.fields.count("query_b");
    if (!has_query && !has_pair) throw ParseError(lineno, "missing query (or query_a/query_b)");

    if (ex.kind == TaskKind::MultipleChoice) {
        if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
            throw ParseError(lineno, "multiple-choice record needs a non-empty choices list");
        }
        for (const auto& c : j["choices"]) {
            if (!c.is_string()) throw ParseError(lineno, "choices must be strings");
            ex.choices.push_back(c.get<std::string>());
        }
        if (ex.label >= ex.choices.size()) throw ParseError(lineno, "label outside choices");
    }
    return ex;
}

inline std::vector<TaskExample> load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset " + path.string());
    std::vector<TaskExample> out;
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        out.push_back(parse_example(line, lineno));
    }
    return out;
}

namespace tasks_detail {

inline std::string fill(const std::string& tpl, const std::map<std::string, std::string>& vars) {
    std::string out;
    std::size_t i = 0;
    while (i < tpl.size()) {
        if (tpl[i] == '{') {
            const auto close = tpl.find('}', i);
            const std::string key = tpl.substr(i + 1, close - i - 1);
            auto it = vars.find(key);
            if (it == vars.end()) throw DataError("no value for placeholder {" + key + "}");
            out += it->second;
            i = close + 1;
        } else {
            out += tpl[i++];
        }
    }
    return out;
}

// Portable Fisher-Yates; std::shuffle is implementation-defined.
template <class T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

}  // namespace tasks_detail

inline std::size_t candidate_count(const PromptSpec& spec, const TaskExample& ex) {
    return spec.kind == TaskKind::Classification ? spec.verbalizers.size() : ex.choices.size();
}

inline void check_example(const TaskSpec& task, const TaskExample& ex) {
    if (ex.kind != task.kind) {
        throw DataError("record of kind " + to_string(ex.kind) + " for " + to_string(task.kind) +
                        " task " + task.name);
    }
    const auto& spec = task.prompt(ex.template_id);
    if (ex.label >= candidate_count(spec, ex)) {
        throw DataError("label " + std::to_string(ex.label) + " outside candidate set of " +
                        spec.id);
    }
}

inline std::string render_context(const PromptSpec& spec, const TaskExample& ex) {
    return tasks_detail::fill(spec.context_template, ex.fields);
}

inline std::string render_answer(const PromptSpec& spec, const TaskExample& ex, std::size_t cand) {
    auto vars = ex.fields;
    if (spec.kind == TaskKind::Classification) {
        vars["label"] = spec.verbalizers.at(cand);
    } else {
        vars["choice"] = ex.choices.at(cand);
    }
    return tasks_detail::fill(spec.answer_template, vars);
}

struct RenderedDemos {
    std::string text;                  // demos joined by the separator
    std::vector<std::size_t> indices;  // pool positions, in rendered order
};

// n_shot demonstrations per class, sampled and ordered under `seed`.
inline RenderedDemos render_demos(const TaskSpec& task, const std::vector<TaskExample>& pool,
                                  std::size_t n_shot, std::uint64_t seed) {
    if (n_shot < 1) throw ConfigError("n_shot must be >= 1");
    std::size_t classes = 0;
    if (task.kind == TaskKind::Classification) {
        classes = task.prompts.front().verbalizers.size();
    } else {
        for (const auto& ex : pool) classes = std::max(classes, ex.choices.size());
    }
    if (classes == 0) throw DataError("empty demonstration pool for task " + task.name);

    std::mt19937_64 rng(seed);
    RenderedDemos out;
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            if (pool[i].label == c) members.push_back(i);
        }
        if (members.size() < n_shot) {
            throw DataError("class " + std::to_string(c) + " of task " + task.name + " has " +
                            std::to_string(members.size()) + " examples, need " +
                            std::to_string(n_shot));
        }
        tasks_detail::shuffle(members, rng);
        out.indices.insert(out.indices.end(), members.begin(),
                           members.begin() + static_cast<std::ptrdiff_t>(n_shot));
    }
    tasks_detail::shuffle(out.indices, rng);
    for (std::size_t k = 0; k < out.indices.size(); ++k) {
        const auto& ex = pool[out.indices[k]];
        check_example(task, ex);
        const auto& spec = task.prompt(ex.template_id);
        if (k) out.text += spec.separator;
        out.text += render_context(spec, ex) + render_answer(spec, ex, ex.label);
    }
    return out;
}

// Token ids of the demonstration block as prepended to each query: the demo
// text followed by the separator.
inline std::vector<TokenId> encode_demos(const TaskSpec& task, const RenderedDemos& demos,
                                         const Tokenizer& tok) {
    return tok.encode(demos.text + task.prompts.front().separator);
}

struct EncodedExample {
    std::vector<TokenId> query;
    std::vector<std::vector<TokenId>> candidates;
    std::size_t label{0};

    // Tokens fed to the model when scoring every candidate without demos.
    std::size_t test_tokens() const {
        std::size_t n = 0;
        for (const auto& c : candidates) n += query.size() + c.size();
        return n;
    }
};

inline EncodedExample encode_example(const TaskSpec& task, const TaskExample& ex,
                                     const Tokenizer& tok) {
    check_example(task, ex);
    const auto& spec = task.prompt(ex.template_id);
    EncodedExample e;
    e.query = tok.encode(render_context(spec, ex));
    if (e.query.empty()) throw DataError("query renders to zero tokens");
    for (std::size_t c = 0; c < candidate_count(spec, ex); ++c) {
        e.candidates.push_back(tok.encode(render_answer(spec, ex, c)));
        if (e.candidates.back().empty()) throw DataError("candidate renders to zero tokens");
    }
    e.label = ex.label;
    return e;
}

enum class ScoreMode { SumLogProb, SumProb };

inline ScoreMode parse_score_mode(const std::string& s) {
    if (s == "sum-log-prob" || s == "logprob") return ScoreMode::SumLogProb;
    if (s == "sum-prob" || s == "prob") return ScoreMode::SumProb;
    throw ConfigError("unknown score mode '" + s + "'");
}

// Attention score-matrix elements for one forward: every query row sees
// the whole prefix and its causal past.
inline std::uint64_t attention_elements(const ModelConfig& cfg, std::size_t prefix_len,
                                        std::size_t len) {
    const std::uint64_t n = len, p = prefix_len;
    return static_cast<std::uint64_t>(cfg.n_layers) * cfg.n_heads * (n * p + n * (n + 1) / 2);
}

struct ForwardCost {
    std::uint64_t tokens{0};
    std::uint64_t attention_elements{0};

    ForwardCost& operator+=(const ForwardCost& o) {
        tokens += o.tokens;
        attention_elements += o.attention_elements;
        return *this;
    }
};

// Scores `candidate` as a continuation of `context` (context must be
// non-empty). Only the candidate positions contribute.
inline double score_candidate(const ModelWeights& model, const KVState* prefix,
                              std::span<const TokenId> context, std::span<const TokenId> candidate,
                              ScoreMode mode, std::size_t position_offset,
                              ForwardCost* cost = nullptr) {
    if (context.empty()) throw InputError("empty scoring context");
    if (candidate.empty()) throw InputError("empty candidate");
    std::vector<TokenId> tokens(context.begin(), context.end());
    tokens.insert(tokens.end(), candidate.begin(), candidate.end());

    ForwardOptions opts;
    opts.position_offset = position_offset;
    opts.logits_from = context.size() - 1;
    ForwardResult fwd = model_forward(model, tokens, prefix, opts);
    if (cost) {
        *cost += {tokens.size(),
                  attention_elements(model.config, prefix ? prefix->len() : 0, tokens.size())};
    }

    double score = 0.0;
    for (std::size_t k = 0; k < candidate.size(); ++k) {
        auto row = fwd.logits.row(k);
        const float mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (float v : row) sum += std::exp(static_cast<double>(v) - mx);
        const double logp =
            static_cast<double>(row[static_cast<std::size_t>(candidate[k])]) - mx - std::log(sum);
        score += mode == ScoreMode::SumLogProb ? logp : std::exp(logp);
    }
    return score;
}

// Index of the maximum; ties go to the lowest index.
inline std::size_t argmax_lowest(const std::vector<double>& scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) best = i;
    }
    return best;
}

// Prediction with a KV prefix (inference stage) or, when `demo_context` is
// non-empty, with the demonstrations prepended to the query (vanilla ICL).
inline std::size_t predict(const ModelWeights& model, const KVState* prefix,
                           const EncodedExample& ex, ScoreMode mode, std::size_t position_offset,
                           std::span<const TokenId> demo_context = {},
                           ForwardCost* cost = nullptr) {
    std::vector<TokenId> context(demo_context.begin(), demo_context.end());
    context.insert(context.end(), ex.query.begin(), ex.query.end());
    std::vector<double> scores;
    scores.reserve(ex.candidates.size());
    for (const auto& cand : ex.candidates) {
        scores.push_back(score_candidate(model, prefix, context, cand, mode, position_offset, cost));
    }
    return argmax_lowest(scores);
}

struct EvalConfig {
    std::size_t n_shot{1};
    std::uint64_t seed{0};
    ScoreMode mode{ScoreMode::SumLogProb};
    std::size_t sweep_steps{15};
    // Inference-stage position offset; defaults to the demonstration length.
    std::optional<std::size_t> position_offset;
    std::size_t threads{1};

    void validate() const {
        if (n_shot < 1) throw ConfigError("n_shot must be >= 1");
        if (sweep_steps < 1) throw ConfigError("sweep upper bound must be >= 1");
        if (threads < 1) throw ConfigError("threads must be >= 1");
    }
};

struct CostReport {
    std::size_t demo_tokens{0};
    double tokens_per_example_ours{0.0};
    double tokens_per_example_baseline{0.0};
    double test_tokens_per_example{0.0};
    std::uint64_t attention_elements_ours{0};      // per sweep step, all examples
    std::uint64_t attention_elements_baseline{0};  // all examples

    double attention_ratio() const {
        return attention_elements_baseline
                   ? static_cast<double>(attention_elements_ours) / attention_elements_baseline
                   : 0.0;
    }
};

struct StepAccuracy {
    std::size_t t{0};
    double accuracy{0.0};
};

struct EvalReport {
    std::vector<StepAccuracy> per_step;
    std::vector<std::vector<std::size_t>> predictions;  // parallel to per_step
    std::size_t best_t{0};
    double best_accuracy{0.0};
    std::optional<double> vanilla_accuracy;  // accuracy at t = 1, when evaluated
    std::size_t example_count{0};
    CostReport cost;
};

namespace tasks_detail {

// Runs fn(i) for i in [0, n) over at most `threads` workers.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += threads) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace tasks_detail

struct PredictionSet {
    std::vector<std::size_t> predictions;
    double accuracy{0.0};
    ForwardCost cost;
};

inline PredictionSet run_predictions(const ModelWeights& model, const KVState* prefix,
                                     const std::vector<EncodedExample>& examples, ScoreMode mode,
                                     std::size_t position_offset,
                                     std::span<const TokenId> demo_context, std::size_t threads) {
    if (examples.empty()) throw DataError("empty evaluation set");
    PredictionSet out;
    out.predictions.resize(examples.size());
    std::vector<ForwardCost> costs(examples.size());
    tasks_detail::parallel_for(examples.size(), threads, [&](std::size_t i) {
        out.predictions[i] =
            predict(model, prefix, examples[i], mode, position_offset, demo_context, &costs[i]);
    });
    std::size_t correct = 0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        correct += out.predictions[i] == examples[i].label;
        out.cost += costs[i];
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(examples.size());
    return out;
}

// Vanilla ICL: demonstrations concatenated in front of every query.
inline PredictionSet evaluate_concatenated(const ModelWeights& model,
                                           std::span<const TokenId> demo_tokens,
                                           const std::vector<EncodedExample>& examples,
                                           const EvalConfig& cfg) {
    return run_predictions(model, nullptr, examples, cfg.mode, 0, demo_tokens, cfg.threads);
}

// Accuracy for every state in `think` (its snapshots, or only its final
// state when none were recorded), with that state as the attention prefix.
inline EvalReport evaluate(const ModelWeights& model, const ThinkResult& think,
                           const std::vector<EncodedExample>& examples, const EvalConfig& cfg) {
    cfg.validate();
    if (examples.empty()) throw DataError("empty evaluation set");
    std::vector<const KVState*> states;
    if (think.snapshots.empty()) {
        states.push_back(&think.final);
    } else {
        for (const auto& s : think.snapshots) states.push_back(&s);
    }
    const std::size_t demo_len = think.final.len();
    const std::size_t offset = cfg.position_offset.value_or(demo_len);

    EvalReport rep;
    rep.example_count = examples.size();
    ForwardCost ours;
    for (const KVState* s : states) {
        PredictionSet ps = run_predictions(model, s, examples, cfg.mode, offset, {}, cfg.threads);
        rep.per_step.push_back({s->step, ps.accuracy});
        rep.predictions.push_back(std::move(ps.predictions));
        ours = ps.cost;
        if (s->step == 1) rep.vanilla_accuracy = ps.accuracy;
    }
    rep.best_t = rep.per_step.front().t;
    rep.best_accuracy = rep.per_step.front().accuracy;
    for (const auto& sa : rep.per_step) {
        if (sa.accuracy > rep.best_accuracy) {
            rep.best_accuracy = sa.accuracy;
            rep.best_t = sa.t;
        }
    }

    auto& c = rep.cost;
    c.demo_tokens = demo_len;
    std::uint64_t test_tokens = 0, baseline_tokens = 0, baseline_attn = 0;
    for (const auto& ex : examples) {
        test_tokens += ex.test_tokens();
        for (const auto& cand : ex.candidates) {
            const std::size_t n = demo_len + ex.query.size() + cand.size();
            baseline_tokens += n;
            baseline_attn += attention_elements(model.config, 0, n);
        }
    }
    const double count = static_cast<double>(examples.size());
    c.tokens_per_example_ours = static_cast<double>(ours.tokens) / count;
    c.test_tokens_per_example = static_cast<double>(test_tokens) / count;
    c.tokens_per_example_baseline = static_cast<double>(baseline_tokens) / count;
    c.attention_elements_ours = ours.attention_elements;
    c.attention_elements_baseline = baseline_attn;
    return rep;
}

// Runs the thinking stage with snapshots up to cfg.sweep_steps and evaluates
// every step.
inline EvalReport evaluate_sweep(const ModelWeights& model, std::span<const TokenId> demo_tokens,
                                 const std::vector<EncodedExample>& examples,
                                 const EvalConfig& cfg, ThinkConfig think_cfg,
                                 ThinkResult* think_out = nullptr) {
    think_cfg.steps = cfg.sweep_steps;
    think_cfg.record_snapshots = true;
    ThinkResult think = deep_think(model, demo_tokens, think_cfg);
    EvalReport rep = evaluate(model, think, examples, cfg);
    if (think_out) *think_out = std::move(think);
    return rep;
}

}  // namespace dt
