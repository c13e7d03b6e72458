#pragma once

#include <stdexcept>
#include <string>

namespace mgcg {

// Shape disagreement between tensor operands.
struct DimensionError : std::invalid_argument {
    explicit DimensionError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Input outside an operation's mathematical domain (empty softmax, tau <= 0, ...).
struct DomainError : std::domain_error {
    explicit DomainError(const std::string& msg) : std::domain_error(msg) {}
};

// Caller violated a documented precondition.
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Object used in an invalid lifecycle state (e.g. backward on a consumed tape).
struct StateError : std::logic_error {
    explicit StateError(const std::string& msg) : std::logic_error(msg) {}
};

// Token index outside the vocabulary.
struct IndexError : std::out_of_range {
    explicit IndexError(const std::string& msg) : std::out_of_range(msg) {}
};

// Unknown symbol during encoding.
struct VocabularyError : std::runtime_error {
    explicit VocabularyError(const std::string& msg) : std::runtime_error(msg) {}
};

// Sequence does not fit the model's context window.
struct CapacityError : std::runtime_error {
    explicit CapacityError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid or inconsistent configuration values.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training diverged or produced non-finite values.
struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

// Optimizer update received a non-finite gradient.
struct UpdateError : std::runtime_error {
    explicit UpdateError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mgcg
