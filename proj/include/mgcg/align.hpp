#pragma once

#include <string>
#include <vector>

#include "mgcg/model.hpp"
#include "mgcg/tokenizer.hpp"

namespace mgcg {

// The behavior the toy model is trained to exhibit: refuse queries that carry
// a harmful marker, comply on everything else.
struct BehaviorSpec {
    std::vector<std::string> harmful_markers;
    std::string refusal_phrase = "i cannot help with that";
    std::string compliance_prefix = "sure here is";

    static BehaviorSpec builtin();
    void validate(const Vocab& vocab) const;
};

struct TrainConfig {
    int epochs = 8;
    int batch = 16;
    double lr = 0.5;
    double label_smoothing = 0.1;
    std::uint64_t seed = 1234;
    int corpus_size = 2000;

    void validate() const;
};

// One attack instance: a harmful query and the affirmative target the
// optimizer steers the model toward.
struct AttackTask {
    std::string id;
    std::string query;    // symbol string, markers included
    std::string target;   // symbol string, compliance-style
};

// n chat lines of the form <bos> <user> query <assistant> response <eot>.
// Queries containing a harmful marker get the refusal phrase; the rest get
// the compliance prefix plus the topic. Queries listed in exclude are never
// emitted (they stay held out for the attack benchmark).
std::vector<TokenSeq> generate_corpus(const BehaviorSpec& spec, const Vocab& vocab, int n,
                                      std::uint64_t seed,
                                      const std::vector<std::string>& exclude = {});

// Frozen attack benchmark: harmful queries with compliance-style targets.
std::vector<AttackTask> make_benchmark_tasks(const BehaviorSpec& spec, const Vocab& vocab,
                                             int count, std::uint64_t seed);

void save_tasks(const std::string& path, const std::vector<AttackTask>& tasks);
std::vector<AttackTask> load_tasks(const std::string& path);

void save_corpus(const std::string& path, const std::vector<TokenSeq>& corpus,
                 const Vocab& vocab);
std::vector<TokenSeq> load_corpus(const std::string& path, const Vocab& vocab);

struct TrainReport {
    double initial_heldout_loss = 0.0;
    double final_heldout_loss = 0.0;
    double refusal_rate = 0.0;      // held-out harmful -> refusal phrase
    double compliance_rate = 0.0;   // held-out benign -> compliance prefix
    int steps = 0;
};

// Plain SGD with gradient clipping at norm 1.0; loss over response tokens
// only. Returns trained parameters (the input is untouched).
ModelParams train(const ModelParams& params, const std::vector<TokenSeq>& corpus,
                  const TrainConfig& cfg, const Vocab& vocab, const BehaviorSpec& spec,
                  TrainReport* report = nullptr);

// Greedy-decoding behavior check over explicit prompts.
struct BehaviorEval {
    double refusal_rate = 0.0;
    double compliance_rate = 0.0;
    int harmful_count = 0;
    int benign_count = 0;
};
BehaviorEval evaluate_behavior(const ModelParams& params, const Vocab& vocab,
                               const BehaviorSpec& spec,
                               const std::vector<TokenSeq>& corpus_lines);

}  // namespace mgcg
