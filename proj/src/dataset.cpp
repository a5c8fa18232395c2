#include "meft/dataset.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "meft/rng.hpp"

namespace meft {

FactDataset gen_fact_dataset(index_t num_facts, index_t vocab, index_t subject_len,
                             index_t object_len, std::uint64_t seed) {
    if (vocab < 3) throw std::invalid_argument("gen_fact_dataset: vocab too small");
    if (object_len < 1 || subject_len < 1) {
        throw std::invalid_argument("gen_fact_dataset: subject_len and object_len must be >= 1");
    }
    // Usable tokens are [1, vocab); distinct (subject, relation) pairs bound
    // the dataset size.
    const double usable = static_cast<double>(vocab - 1);
    const double capacity = std::pow(usable, static_cast<double>(subject_len + 1));
    if (static_cast<double>(num_facts) > capacity) {
        throw std::invalid_argument("gen_fact_dataset: num_facts exceeds distinct pair capacity");
    }

    SeededRng rng(seed);
    FactDataset ds;
    ds.vocab = vocab;
    ds.subject_len = subject_len;
    ds.object_len = object_len;
    ds.seed = seed;

    std::unordered_set<std::string> seen;
    while (static_cast<index_t>(ds.facts.size()) < num_facts) {
        Fact f;
        std::string key;
        for (index_t i = 0; i < subject_len; ++i) {
            const index_t tok = rng.uniform_int(1, vocab - 1);
            f.subject.push_back(tok);
            key += std::to_string(tok) + ",";
        }
        f.relation = rng.uniform_int(1, vocab - 1);
        key += std::to_string(f.relation);
        if (!seen.insert(key).second) continue;
        for (index_t i = 0; i < object_len; ++i) f.object.push_back(rng.uniform_int(1, vocab - 1));
        ds.facts.push_back(std::move(f));
    }
    return ds;
}

void save_dataset(const FactDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
    out << "meft-facts 1 vocab=" << ds.vocab << " seed=" << ds.seed
        << " subject_len=" << ds.subject_len << " object_len=" << ds.object_len
        << " count=" << ds.facts.size() << "\n";
    for (const Fact& f : ds.facts) {
        for (index_t t : f.subject) out << t << " ";
        out << f.relation;
        for (index_t t : f.object) out << " " << t;
        out << "\n";
    }
    if (!out) throw std::runtime_error("save_dataset: write failed");
}

FactDataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
    std::string header;
    if (!std::getline(in, header)) throw std::runtime_error("load_dataset: empty file");

    FactDataset ds;
    index_t count = -1;
    {
        std::istringstream hs(header);
        std::string tag;
        int version = 0;
        hs >> tag >> version;
        if (tag != "meft-facts" || version != 1) {
            throw std::runtime_error("load_dataset: bad header: " + header);
        }
        std::string field;
        while (hs >> field) {
            const auto eq = field.find('=');
            if (eq == std::string::npos) throw std::runtime_error("load_dataset: bad field " + field);
            const std::string name = field.substr(0, eq);
            const long long value = std::stoll(field.substr(eq + 1));
            if (name == "vocab") ds.vocab = value;
            else if (name == "seed") ds.seed = static_cast<std::uint64_t>(value);
            else if (name == "subject_len") ds.subject_len = value;
            else if (name == "object_len") ds.object_len = value;
            else if (name == "count") count = value;
            else throw std::runtime_error("load_dataset: unknown header field " + name);
        }
    }
    if (ds.vocab < 3 || ds.subject_len < 1 || ds.object_len < 1 || count < 0) {
        throw std::runtime_error("load_dataset: incomplete header");
    }

    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        Fact f;
        index_t tok;
        for (index_t i = 0; i < ds.subject_len; ++i) {
            if (!(ls >> tok)) throw std::runtime_error("load_dataset: short record");
            f.subject.push_back(tok);
        }
        if (!(ls >> f.relation)) throw std::runtime_error("load_dataset: short record");
        for (index_t i = 0; i < ds.object_len; ++i) {
            if (!(ls >> tok)) throw std::runtime_error("load_dataset: short record");
            f.object.push_back(tok);
        }
        if (ls >> tok) throw std::runtime_error("load_dataset: trailing tokens in record");
        ds.facts.push_back(std::move(f));
    }
    if (static_cast<index_t>(ds.facts.size()) != count) {
        throw std::runtime_error("load_dataset: record count mismatch");
    }
    return ds;
}

}  // namespace meft
