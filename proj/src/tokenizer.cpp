#include "mgcg/tokenizer.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mgcg {

Vocab::Vocab(std::vector<std::string> symbols, SpecialTokens special)
    : symbols_(std::move(symbols)), special_(special) {
    for (int i = 0; i < static_cast<int>(symbols_.size()); ++i) {
        auto [it, inserted] = index_.emplace(symbols_[i], i);
        (void)it;
        if (!inserted) throw ConfigError("duplicate vocabulary symbol: " + symbols_[i]);
    }
    for (int id : {special_.bos, special_.user, special_.assistant, special_.eot,
                   special_.pad_bang}) {
        if (id < 0 || id >= size()) {
            throw ConfigError("special token id " + std::to_string(id) +
                              " outside vocabulary of size " + std::to_string(size()));
        }
    }
}

bool Vocab::contains(const std::string& symbol) const {
    return index_.count(symbol) > 0;
}

int Vocab::id(const std::string& symbol) const {
    auto it = index_.find(symbol);
    if (it == index_.end()) throw VocabularyError("unknown symbol: '" + symbol + "'");
    return it->second;
}

const std::string& Vocab::symbol(int id) const {
    if (id < 0 || id >= size()) {
        throw IndexError("symbol id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(size()));
    }
    return symbols_[id];
}

TokenSeq Vocab::encode(const std::string& text) const {
    TokenSeq ids;
    std::istringstream in(text);
    std::string tok;
    while (in >> tok) ids.push_back(id(tok));
    return ids;
}

std::string Vocab::decode(const TokenSeq& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += symbol(ids[i]);
    }
    return out;
}

void Vocab::save(const std::string& path) const {
    nlohmann::json j;
    j["symbols"] = symbols_;
    j["special"] = {{"bos", special_.bos},
                    {"user", special_.user},
                    {"assistant", special_.assistant},
                    {"eot", special_.eot},
                    {"pad_bang", special_.pad_bang}};
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write vocab file: " + path);
    out << j.dump(2) << "\n";
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read vocab file: " + path);
    nlohmann::json j;
    in >> j;
    SpecialTokens sp;
    sp.bos = j.at("special").at("bos").get<int>();
    sp.user = j.at("special").at("user").get<int>();
    sp.assistant = j.at("special").at("assistant").get<int>();
    sp.eot = j.at("special").at("eot").get<int>();
    sp.pad_bang = j.at("special").at("pad_bang").get<int>();
    return Vocab(j.at("symbols").get<std::vector<std::string>>(), sp);
}

Vocab Vocab::builtin() {
    std::vector<std::string> symbols = {
        // control tokens
        "<bos>", "<user>", "<assistant>", "<eot>",
        // padding token
        "!",
        // digits
        "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
        // punctuation
        ".", ",", "?", ":", ";",
        // function words and response vocabulary
        "i", "cannot", "can", "not", "help", "with", "that", "sure", "here", "is",
        "how", "to", "a", "the", "for", "my", "me", "please", "tell", "show",
        "give", "about", "you", "do", "what", "need", "want", "of", "and", "on",
        "in", "best",
        // verbs
        "make", "build", "write", "create", "design", "plan", "draw", "cook",
        "bake", "fix", "find", "get", "use", "learn",
        // benign topics
        "cake", "garden", "poem", "song", "story", "website", "letter", "essay",
        "recipe", "painting", "robot", "kite", "puzzle", "playlist", "budget",
        "schedule", "resume", "speech", "quiz", "map", "boat", "house", "game",
        "movie",
        // harmful markers
        "bomb", "weapon", "poison", "virus", "malware", "explosive", "drugs",
        "hack", "steal", "counterfeit",
        // filler
        "small", "big", "fast", "slow", "red", "blue", "green", "new", "good",
        "easy", "simple", "quick", "safe", "fun", "tree", "car", "book", "music",
        "dance", "photo", "idea", "list", "guide", "tutorial", "step", "way",
        "bird", "river", "stone", "cloud",
    };
    SpecialTokens sp;
    sp.bos = 0;
    sp.user = 1;
    sp.assistant = 2;
    sp.eot = 3;
    sp.pad_bang = 4;
    return Vocab(std::move(symbols), sp);
}

TokenSeq pad_suffix(const TokenSeq& suffix, int target_len, const Vocab& vocab) {
    if (target_len < static_cast<int>(suffix.size())) {
        throw ContractError("pad_suffix: target length " + std::to_string(target_len) +
                            " shorter than suffix of length " + std::to_string(suffix.size()));
    }
    TokenSeq out = suffix;
    out.resize(target_len, vocab.special().pad_bang);
    return out;
}

TokenSeq strip_trailing_pad(const TokenSeq& suffix, const Vocab& vocab) {
    TokenSeq out = suffix;
    while (!out.empty() && out.back() == vocab.special().pad_bang) out.pop_back();
    return out;
}

}  // namespace mgcg
