#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mgcg/tokenizer.hpp"

namespace mgcg {

struct PruneEvent {
    int iteration = 0;
    int removed_position = -1;   // index in the suffix at the time of the attempt
    int removed_token = -1;
    double p_value = 0.0;
    bool rolled_back = false;
    double loss_before = 0.0;
    double loss_after = 0.0;
};

// One record per iteration (step 0 is the initial state).
struct TraceStep {
    int step = 0;
    double loss = 0.0;
    TokenSeq suffix;
    long forward_passes = 0;          // forward passes spent on this step
    std::vector<double> mask_p;       // empty for plain GCG
    double tau = -1.0;                // negative when not applicable
    std::vector<int> positions;       // original position ids of surviving tokens
    std::optional<PruneEvent> prune;
};

struct AttackTrace {
    std::vector<TraceStep> steps;
    bool success = false;
    int iterations = 0;               // optimization iterations executed
    TokenSeq final_suffix;
    long total_forward_passes = 0;
};

void write_trace_jsonl(const std::string& path, const AttackTrace& trace);
AttackTrace read_trace_jsonl(const std::string& path);

}  // namespace mgcg
