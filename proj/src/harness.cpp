#include "mgcg/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mgcg {

std::vector<TokenSeq> RefusalPatterns::tokenized(const Vocab& vocab) const {
    std::vector<TokenSeq> out;
    for (const std::string& phrase : phrases) out.push_back(vocab.encode(phrase));
    return out;
}

void RefusalPatterns::validate(const Vocab& vocab) const {
    if (phrases.empty()) throw ConfigError("refusal patterns: list is empty");
    for (const std::string& phrase : phrases) {
        if (vocab.encode(phrase).empty()) {
            throw ConfigError("refusal patterns: phrase '" + phrase + "' encodes to nothing");
        }
    }
}

namespace {

bool contains_run(const TokenSeq& haystack, const TokenSeq& needle) {
    if (needle.empty() || needle.size() > haystack.size()) return false;
    for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
        if (std::equal(needle.begin(), needle.end(), haystack.begin() + i)) return true;
    }
    return false;
}

bool response_is_success(const TokenSeq& response, const std::vector<TokenSeq>& patterns) {
    for (const TokenSeq& pattern : patterns) {
        if (contains_run(response, pattern)) return false;
    }
    return true;
}

}  // namespace

bool check_success(const ModelParams& params, const TokenSeq& prompt, const TokenSeq& suffix,
                   const RefusalPatterns& patterns, int max_new, const Vocab& vocab) {
    patterns.validate(vocab);
    TokenSeq decode_prompt = prompt;
    decode_prompt.insert(decode_prompt.end(), suffix.begin(), suffix.end());
    decode_prompt.push_back(vocab.special().assistant);
    GenerateResult gen = generate(params, decode_prompt, max_new, vocab.special().eot);
    return response_is_success(gen.tokens, patterns.tokenized(vocab));
}

SuccessChecker make_success_checker(const ModelParams& params, const TokenSeq& prompt,
                                    const RefusalPatterns& patterns, int max_new,
                                    const Vocab& vocab) {
    patterns.validate(vocab);
    std::vector<TokenSeq> pattern_ids = patterns.tokenized(vocab);
    const int eot = vocab.special().eot;
    const int assistant = vocab.special().assistant;
    return [=, &params](const TokenSeq& suffix) -> SuccessCheck {
        TokenSeq decode_prompt = prompt;
        decode_prompt.insert(decode_prompt.end(), suffix.begin(), suffix.end());
        decode_prompt.push_back(assistant);
        GenerateResult gen = generate(params, decode_prompt, max_new, eot);
        SuccessCheck check;
        check.success = response_is_success(gen.tokens, pattern_ids);
        check.forward_passes = static_cast<long>(gen.tokens.size());
        return check;
    };
}

double compute_scr(int l_original, int l_final) {
    if (l_final < 1 || l_final > l_original) {
        throw ContractError("compute_scr: need 1 <= L_final <= L_original, got " +
                            std::to_string(l_final) + " vs " + std::to_string(l_original));
    }
    return static_cast<double>(l_original - l_final) / l_original * 100.0;
}

MethodSummary summarize(const std::string& method, int suffix_length,
                        std::vector<AttackResult> rows) {
    MethodSummary s;
    s.method = method;
    s.suffix_length = suffix_length;
    s.rows = std::move(rows);
    if (s.rows.empty()) return s;
    int successes = 0;
    double scr_sum = 0.0, fwd_sum = 0.0;
    for (const AttackResult& r : s.rows) {
        successes += r.success ? 1 : 0;
        scr_sum += compute_scr(r.l_original, r.l_final);
        fwd_sum += static_cast<double>(r.forward_passes);
    }
    const double n = static_cast<double>(s.rows.size());
    s.asr_percent = successes / n * 100.0;
    s.mean_scr_percent = scr_sum / n;
    s.mean_forward_passes = fwd_sum / n;
    return s;
}

namespace {

struct Job {
    int method_idx;
    int length_idx;
    int task_idx;
};

}  // namespace

AttackResult run_attack_task(const ModelParams& params, const Vocab& vocab,
                             const AttackTask& task, const std::string& method,
                             int suffix_length, const BenchmarkConfig& cfg,
                             std::uint64_t task_seed) {
    const SpecialTokens& sp = vocab.special();
    TokenSeq prompt = {sp.bos, sp.user};
    TokenSeq query = vocab.encode(task.query);
    prompt.insert(prompt.end(), query.begin(), query.end());
    TokenSeq target = {sp.assistant};
    TokenSeq target_body = vocab.encode(task.target);
    target.insert(target.end(), target_body.begin(), target_body.end());

    TokenSeq base(cfg.base_suffix_length, sp.pad_bang);
    TokenSeq suffix0 = pad_suffix(base, suffix_length, vocab);

    GcgConfig gcg_cfg = cfg.gcg;
    gcg_cfg.seed = task_seed;
    SuccessChecker checker = make_success_checker(params, prompt, cfg.patterns, cfg.max_new,
                                                  vocab);

    AttackResult result;
    result.task_id = task.id;
    result.method = method;
    result.suffix_length = suffix_length;
    result.l_original = static_cast<int>(suffix0.size());

    const auto t0 = std::chrono::steady_clock::now();
    AttackTrace trace;
    if (method == "gcg") {
        trace = run_gcg(params, prompt, target, suffix0, gcg_cfg, checker);
    } else if (method == "mask-gcg") {
        MaskGcgOptions options = cfg.mask_options;
        MlpInit mlp = cfg.mlp;
        mlp.seed = derive_seed(task_seed, 0x6d61736bULL);  // independent noise stream
        TemperatureSchedule sched = cfg.schedule;
        if (sched.horizon <= 0) sched.horizon = std::max(1, gcg_cfg.n_steps);
        trace = run_mask_gcg(params, prompt, target, suffix0, gcg_cfg, cfg.prune, sched, mlp,
                             checker, options);
    } else {
        throw ConfigError("unknown method: " + method);
    }
    const auto t1 = std::chrono::steady_clock::now();

    result.success = trace.success;
    result.iterations = trace.iterations;
    result.l_final = static_cast<int>(trace.final_suffix.size());
    result.final_suffix = trace.final_suffix;
    result.forward_passes = trace.total_forward_passes;
    result.wall_time_sec = std::chrono::duration<double>(t1 - t0).count();
    for (const TraceStep& s : trace.steps) {
        if (s.prune && !s.prune->rolled_back) result.committed_prunes += 1;
    }

    if (!cfg.out_dir.empty()) {
        std::ostringstream name;
        name << "trace_" << method << "_" << suffix_length << "_" << task.id << ".jsonl";
        std::filesystem::path path = std::filesystem::path(cfg.out_dir) / name.str();
        write_trace_jsonl(path.string(), trace);
        result.trace_file = name.str();
    }
    return result;
}

namespace {

nlohmann::json result_to_json(const AttackResult& r) {
    return {{"task_id", r.task_id},
            {"method", r.method},
            {"suffix_length", r.suffix_length},
            {"success", r.success},
            {"iterations", r.iterations},
            {"l_original", r.l_original},
            {"l_final", r.l_final},
            {"scr_percent", compute_scr(r.l_original, r.l_final)},
            {"forward_passes", r.forward_passes},
            {"final_suffix", r.final_suffix},
            {"trace_file", r.trace_file},
            {"committed_prunes", r.committed_prunes}};
}

AttackResult result_from_json(const nlohmann::json& j) {
    AttackResult r;
    r.task_id = j.at("task_id").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.suffix_length = j.at("suffix_length").get<int>();
    r.success = j.at("success").get<bool>();
    r.iterations = j.at("iterations").get<int>();
    r.l_original = j.at("l_original").get<int>();
    r.l_final = j.at("l_final").get<int>();
    r.forward_passes = j.at("forward_passes").get<long>();
    r.final_suffix = j.at("final_suffix").get<TokenSeq>();
    r.trace_file = j.value("trace_file", std::string());
    r.committed_prunes = j.value("committed_prunes", 0);
    return r;
}

}  // namespace

BenchmarkSummary run_benchmark(const ModelParams& params, const Vocab& vocab,
                               const std::vector<AttackTask>& tasks,
                               const BenchmarkConfig& cfg) {
    if (tasks.empty()) throw ContractError("run_benchmark: no tasks");
    if (cfg.methods.empty()) throw ConfigError("run_benchmark: no methods");
    if (cfg.suffix_lengths.empty()) throw ConfigError("run_benchmark: no suffix lengths");
    cfg.patterns.validate(vocab);
    if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

    std::vector<Job> jobs;
    for (int mi = 0; mi < static_cast<int>(cfg.methods.size()); ++mi) {
        for (int li = 0; li < static_cast<int>(cfg.suffix_lengths.size()); ++li) {
            for (int ti = 0; ti < static_cast<int>(tasks.size()); ++ti) {
                jobs.push_back(Job{mi, li, ti});
            }
        }
    }

    std::vector<AttackResult> results(jobs.size());
    std::vector<std::string> errors(jobs.size());
    const int n_jobs = static_cast<int>(jobs.size());
#pragma omp parallel for schedule(dynamic, 1) if (cfg.parallel_tasks)
    for (int j = 0; j < n_jobs; ++j) {
        const Job& job = jobs[j];
        // Methods and lengths share a task's stream so runs are comparable.
        const std::uint64_t task_seed = derive_seed(cfg.seed, job.task_idx);
        try {
            results[j] = run_attack_task(params, vocab, tasks[job.task_idx],
                                         cfg.methods[job.method_idx],
                                         cfg.suffix_lengths[job.length_idx], cfg, task_seed);
        } catch (const std::exception& e) {
            AttackResult failed;
            failed.task_id = tasks[job.task_idx].id;
            failed.method = cfg.methods[job.method_idx];
            failed.suffix_length = cfg.suffix_lengths[job.length_idx];
            failed.l_original = cfg.suffix_lengths[job.length_idx];
            failed.l_final = failed.l_original;
            results[j] = failed;
            errors[j] = e.what();
        }
    }

    BenchmarkSummary summary;
    summary.task_count = static_cast<int>(tasks.size());
    for (int mi = 0; mi < static_cast<int>(cfg.methods.size()); ++mi) {
        for (int li = 0; li < static_cast<int>(cfg.suffix_lengths.size()); ++li) {
            std::vector<AttackResult> rows;
            for (int j = 0; j < n_jobs; ++j) {
                if (jobs[j].method_idx == mi && jobs[j].length_idx == li) {
                    rows.push_back(results[j]);
                }
            }
            summary.methods.push_back(
                summarize(cfg.methods[mi], cfg.suffix_lengths[li], std::move(rows)));
        }
    }
    return summary;
}

void write_summary(const std::string& path, const BenchmarkSummary& summary) {
    nlohmann::json j;
    j["run_id"] = summary.run_id;
    j["task_count"] = summary.task_count;
    nlohmann::json methods = nlohmann::json::array();
    for (const MethodSummary& m : summary.methods) {
        nlohmann::json rows = nlohmann::json::array();
        for (const AttackResult& r : m.rows) rows.push_back(result_to_json(r));
        methods.push_back({{"method", m.method},
                           {"suffix_length", m.suffix_length},
                           {"asr_percent", m.asr_percent},
                           {"mean_scr_percent", m.mean_scr_percent},
                           {"mean_forward_passes", m.mean_forward_passes},
                           {"rows", rows}});
    }
    j["methods"] = methods;
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write summary: " + path);
    out << j.dump(2) << "\n";
}

BenchmarkSummary read_summary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read summary: " + path);
    nlohmann::json j;
    in >> j;
    BenchmarkSummary summary;
    summary.run_id = j.at("run_id").get<std::string>();
    summary.task_count = j.at("task_count").get<int>();
    for (const auto& mj : j.at("methods")) {
        MethodSummary m;
        m.method = mj.at("method").get<std::string>();
        m.suffix_length = mj.at("suffix_length").get<int>();
        m.asr_percent = mj.at("asr_percent").get<double>();
        m.mean_scr_percent = mj.at("mean_scr_percent").get<double>();
        m.mean_forward_passes = mj.at("mean_forward_passes").get<double>();
        for (const auto& rj : mj.at("rows")) m.rows.push_back(result_from_json(rj));
        summary.methods.push_back(std::move(m));
    }
    return summary;
}

void write_timing(const std::string& path, const BenchmarkSummary& summary) {
    nlohmann::json j = nlohmann::json::array();
    for (const MethodSummary& m : summary.methods) {
        double total = 0.0;
        nlohmann::json rows = nlohmann::json::array();
        for (const AttackResult& r : m.rows) {
            total += r.wall_time_sec;
            rows.push_back({{"task_id", r.task_id}, {"wall_time_sec", r.wall_time_sec}});
        }
        j.push_back({{"method", m.method},
                     {"suffix_length", m.suffix_length},
                     {"mean_wall_time_sec", m.rows.empty() ? 0.0 : total / m.rows.size()},
                     {"rows", rows}});
    }
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write timing: " + path);
    out << j.dump(2) << "\n";
}

std::string render_summary_grid(const BenchmarkSummary& summary) {
    std::ostringstream os;
    os << "method      len    ASR%     SCR%     fwd passes\n";
    os << "---------------------------------------------------\n";
    for (const MethodSummary& m : summary.methods) {
        char line[128];
        std::snprintf(line, sizeof(line), "%-10s  %3d  %6.1f  %7.2f  %13.1f\n",
                      m.method.c_str(), m.suffix_length, m.asr_percent, m.mean_scr_percent,
                      m.mean_forward_passes);
        os << line;
    }
    return os.str();
}

void write_mask_evolution_csv(const std::string& path, const AttackTrace& trace) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write csv: " + path);
    out << "step,position,p\n";
    for (const TraceStep& s : trace.steps) {
        if (s.mask_p.empty()) continue;
        for (std::size_t i = 0; i < s.mask_p.size(); ++i) {
            const int pos = i < s.positions.size() ? s.positions[i] : static_cast<int>(i);
            char line[64];
            std::snprintf(line, sizeof(line), "%d,%d,%.17g\n", s.step, pos, s.mask_p[i]);
            out << line;
        }
    }
}

}  // namespace mgcg
