#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "mgcg/errors.hpp"

namespace mgcg {

// Ordered sequence of vocabulary indices; the unit of prompts, suffixes and
// targets throughout the attack pipeline.
using TokenSeq = std::vector<int>;

struct SpecialTokens {
    int bos = -1;
    int user = -1;
    int assistant = -1;
    int eot = -1;
    int pad_bang = -1;  // the "!" padding token
};

// Fixed word-level vocabulary. Whitespace tokenization, no merges.
class Vocab {
public:
    Vocab() = default;
    Vocab(std::vector<std::string> symbols, SpecialTokens special);

    static Vocab builtin();

    int size() const { return static_cast<int>(symbols_.size()); }
    const std::vector<std::string>& symbols() const { return symbols_; }
    const SpecialTokens& special() const { return special_; }

    bool contains(const std::string& symbol) const;
    int id(const std::string& symbol) const;
    const std::string& symbol(int id) const;

    TokenSeq encode(const std::string& text) const;
    std::string decode(const TokenSeq& ids) const;

    void save(const std::string& path) const;
    static Vocab load(const std::string& path);

private:
    std::vector<std::string> symbols_;
    std::unordered_map<std::string, int> index_;
    SpecialTokens special_;
};

// Extends a suffix to target_len by appending "!" tokens. Never truncates.
TokenSeq pad_suffix(const TokenSeq& suffix, int target_len, const Vocab& vocab);

// Drops trailing "!" tokens (inverse of pad_suffix for unpadded inputs).
TokenSeq strip_trailing_pad(const TokenSeq& suffix, const Vocab& vocab);

}  // namespace mgcg
