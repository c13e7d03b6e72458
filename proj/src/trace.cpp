#include "mgcg/trace.hpp"

#include <fstream>

#include <json.hpp>

#include "mgcg/errors.hpp"

namespace mgcg {

namespace {

nlohmann::json prune_to_json(const PruneEvent& e) {
    return {{"iteration", e.iteration},
            {"removed_position", e.removed_position},
            {"removed_token", e.removed_token},
            {"p_value", e.p_value},
            {"rolled_back", e.rolled_back},
            {"loss_before", e.loss_before},
            {"loss_after", e.loss_after}};
}

PruneEvent prune_from_json(const nlohmann::json& j) {
    PruneEvent e;
    e.iteration = j.at("iteration").get<int>();
    e.removed_position = j.at("removed_position").get<int>();
    e.removed_token = j.at("removed_token").get<int>();
    e.p_value = j.at("p_value").get<double>();
    e.rolled_back = j.at("rolled_back").get<bool>();
    e.loss_before = j.at("loss_before").get<double>();
    e.loss_after = j.at("loss_after").get<double>();
    return e;
}

}  // namespace

void write_trace_jsonl(const std::string& path, const AttackTrace& trace) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write trace: " + path);
    for (const TraceStep& s : trace.steps) {
        nlohmann::json j;
        j["step"] = s.step;
        j["loss"] = s.loss;
        j["suffix_ids"] = s.suffix;
        j["forward_passes"] = s.forward_passes;
        if (!s.mask_p.empty()) j["mask_p"] = s.mask_p;
        if (s.tau >= 0.0) j["tau"] = s.tau;
        if (!s.positions.empty()) j["positions"] = s.positions;
        if (s.prune) j["prune_event"] = prune_to_json(*s.prune);
        out << j.dump() << "\n";
    }
    nlohmann::json tail;
    tail["final"] = {{"success", trace.success},
                     {"iterations", trace.iterations},
                     {"final_suffix", trace.final_suffix},
                     {"total_forward_passes", trace.total_forward_passes}};
    out << tail.dump() << "\n";
}

AttackTrace read_trace_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read trace: " + path);
    AttackTrace trace;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        if (j.contains("final")) {
            const nlohmann::json& f = j["final"];
            trace.success = f.at("success").get<bool>();
            trace.iterations = f.at("iterations").get<int>();
            trace.final_suffix = f.at("final_suffix").get<TokenSeq>();
            trace.total_forward_passes = f.at("total_forward_passes").get<long>();
            continue;
        }
        TraceStep s;
        s.step = j.at("step").get<int>();
        s.loss = j.at("loss").get<double>();
        s.suffix = j.at("suffix_ids").get<TokenSeq>();
        s.forward_passes = j.at("forward_passes").get<long>();
        if (j.contains("mask_p")) s.mask_p = j["mask_p"].get<std::vector<double>>();
        if (j.contains("tau")) s.tau = j["tau"].get<double>();
        if (j.contains("positions")) s.positions = j["positions"].get<std::vector<int>>();
        if (j.contains("prune_event")) s.prune = prune_from_json(j["prune_event"]);
        trace.steps.push_back(std::move(s));
    }
    return trace;
}

}  // namespace mgcg
