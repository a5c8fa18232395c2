#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meft/matrix.hpp"

namespace meft {

// One synthetic fact: subject tokens + relation token -> object tokens.
// Token 0 is reserved for padding and never appears in a fact.
struct Fact {
    std::vector<index_t> subject;
    index_t relation = 0;
    std::vector<index_t> object;
};

// Memorization task standing in for closed-book QA: eval facts are a subset
// of train facts, so exact match measures capacity, not generalization.
struct FactDataset {
    index_t vocab = 0;
    index_t subject_len = 0;
    index_t object_len = 0;
    std::uint64_t seed = 0;
    std::vector<Fact> facts;

    index_t fact_len() const { return subject_len + 1 + object_len; }
    index_t prompt_len() const { return subject_len + 1; }
};

// Uniform random facts with distinct (subject, relation) pairs; deterministic
// per seed. Throws if num_facts exceeds the distinct-pair capacity.
FactDataset gen_fact_dataset(index_t num_facts, index_t vocab, index_t subject_len,
                             index_t object_len, std::uint64_t seed);

// Line-delimited integer records with a one-line header.
void save_dataset(const FactDataset& ds, const std::string& path);
FactDataset load_dataset(const std::string& path);

}  // namespace meft
