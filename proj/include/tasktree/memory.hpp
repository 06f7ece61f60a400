#pragma once

// Three-tier memory: a short-term rolling cache of raw invocation and
// anomaly records, a medium-term template store grown by periodic
// consolidation with semantic normalization, and a lifelong store of
// human-verified prompt hints loaded from disk. Consolidation and retrieval
// are deterministic; no model in the loop.

#include <cstdint>
#include <deque>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tasktree/core.hpp"
#include "tasktree/dsl.hpp"

namespace tasktree {

enum class MemoryKind { Invocation, Anomaly, Outcome };

inline std::string memory_kind_name(MemoryKind k) {
    switch (k) {
        case MemoryKind::Invocation: return "invocation";
        case MemoryKind::Anomaly: return "anomaly";
        case MemoryKind::Outcome: return "outcome";
    }
    return "?";
}

// Structured shadow of an invocation payload, kept so promotion can later
// synthesize a skill from the recorded call sequence.
struct CallRecord {
    std::string primitive;
    std::vector<Param> params;
    std::optional<std::pair<std::string, Vec3>> located;  // object and where a locate found it
};

struct InvocationDetail {
    std::string name;
    std::vector<Param> args;
    std::vector<CallRecord> sequence;
};

struct MemoryEntry {
    double timestamp = 0.0;
    MemoryKind kind = MemoryKind::Invocation;
    std::string payload;
    std::string task_label;
    std::uint64_t seq = 0;  // global insertion order, set by record_event
    std::optional<InvocationDetail> detail;
};

// Rolling-window cache, capacity 10: insertion beyond capacity evicts the
// oldest entry.
class ShortTermMemory {
public:
    static constexpr std::size_t kCapacity = 10;

    void record(MemoryEntry entry) {
        entry.seq = ++next_seq_;
        ring_.push_back(std::move(entry));
        if (ring_.size() > kCapacity) {
            ring_.pop_front();
        }
    }

    std::size_t size() const { return ring_.size(); }
    const std::deque<MemoryEntry>& entries() const { return ring_; }

private:
    std::deque<MemoryEntry> ring_;
    std::uint64_t next_seq_ = 0;
};

inline ShortTermMemory record_event(ShortTermMemory stm, MemoryEntry entry) {
    stm.record(std::move(entry));
    return stm;
}

// --- semantic normalization -------------------------------------------------

class UnparseableCall : public std::runtime_error {
public:
    explicit UnparseableCall(const std::string& what) : std::runtime_error(what) {}
};

struct NormalizedCall {
    std::string canonical;
    std::uint64_t hash = 0;
};

inline std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Canonical call form: keyword arguments sorted by name, literals replaced
// by typed placeholders, single spaces. "grasp(:obj \"apple\" :force 2.0)"
// and "grasp(:force 2.1 :obj \"pear\")" normalize identically.
inline NormalizedCall normalize(const std::string& call_text) {
    dsl_detail::Lexer lexer(call_text);
    dsl_detail::Token tok = lexer.next();
    if (tok.kind != dsl_detail::TokKind::Ident) {
        throw UnparseableCall("call must start with an identifier: " + call_text);
    }
    std::string head = tok.text;
    tok = lexer.next();
    if (tok.kind != dsl_detail::TokKind::LParen) {
        throw UnparseableCall("expected '(' after call head: " + call_text);
    }
    std::vector<std::pair<std::string, std::string>> kwargs;
    tok = lexer.next();
    while (tok.kind != dsl_detail::TokKind::RParen) {
        if (tok.kind != dsl_detail::TokKind::Keyword) {
            throw UnparseableCall("expected keyword argument in: " + call_text);
        }
        std::string name = tok.text;
        tok = lexer.next();
        std::string placeholder;
        switch (tok.kind) {
            case dsl_detail::TokKind::Num:
                placeholder = "‹num›";
                tok = lexer.next();
                break;
            case dsl_detail::TokKind::Str:
                placeholder = "‹str›";
                tok = lexer.next();
                break;
            case dsl_detail::TokKind::Ident:
                if (tok.text == "true" || tok.text == "false") {
                    placeholder = "‹bool›";
                    tok = lexer.next();
                    break;
                }
                throw UnparseableCall("bare identifier value in: " + call_text);
            case dsl_detail::TokKind::LParen: {
                for (int i = 0; i < 3; ++i) {
                    tok = lexer.next();
                    if (tok.kind != dsl_detail::TokKind::Num) {
                        throw UnparseableCall("malformed vec3 in: " + call_text);
                    }
                }
                tok = lexer.next();
                if (tok.kind != dsl_detail::TokKind::RParen) {
                    throw UnparseableCall("unterminated vec3 in: " + call_text);
                }
                placeholder = "‹pos›";
                tok = lexer.next();
                break;
            }
            default:
                throw UnparseableCall("missing value for :" + name + " in: " + call_text);
        }
        kwargs.emplace_back(std::move(name), std::move(placeholder));
        // tok already advanced past the value
    }
    if (lexer.next().kind != dsl_detail::TokKind::End) {
        throw UnparseableCall("trailing garbage after call: " + call_text);
    }
    std::sort(kwargs.begin(), kwargs.end());
    std::string canonical = head + "(";
    bool first = true;
    for (const auto& [name, ph] : kwargs) {
        if (!first) {
            canonical += " ";
        }
        first = false;
        canonical += ":" + name + " " + ph;
    }
    canonical += ")";
    return {canonical, fnv1a64(canonical)};
}

inline std::string format_call(const std::string& name, const std::vector<Param>& args) {
    std::string out = name + "(";
    bool first = true;
    for (const Param& p : args) {
        if (!first) {
            out += " ";
        }
        first = false;
        out += ":" + p.name + " " + dsl_detail::format_value(p.value);
    }
    out += ")";
    return out;
}

// --- medium-term template store ----------------------------------------------

struct CallTemplate {
    std::string canonical;
    int count = 0;
    std::deque<double> recent;  // invocation timestamps inside the trailing hour
    std::optional<InvocationDetail> first_detail;
};

struct MediumTermMemory {
    std::map<std::uint64_t, CallTemplate> templates;
    double last_consolidated = 0.0;
    std::uint64_t consumed_seq = 0;

    static constexpr double kIntervalS = 600.0;    // consolidation cadence
    static constexpr double kWindowS = 3600.0;     // retention rate window
    static constexpr int kMinRatePerHour = 3;
};

// Periodic summarization: no-op before the 10-minute interval elapses;
// otherwise drains new short-term invocation entries into normalized
// templates and prunes any template below 3 invocations in the trailing
// hour.
inline MediumTermMemory consolidate(const ShortTermMemory& stm, MediumTermMemory mtm, double clock) {
    if (clock - mtm.last_consolidated < MediumTermMemory::kIntervalS) {
        return mtm;
    }
    for (const MemoryEntry& e : stm.entries()) {
        if (e.seq <= mtm.consumed_seq || e.kind != MemoryKind::Invocation) {
            continue;
        }
        NormalizedCall norm;
        try {
            norm = normalize(e.payload);
        } catch (const UnparseableCall&) {
            continue;  // free-form invocation text never becomes a template
        }
        CallTemplate& tmpl = mtm.templates[norm.hash];
        tmpl.canonical = norm.canonical;
        ++tmpl.count;
        tmpl.recent.push_back(e.timestamp);
        if (!tmpl.first_detail && e.detail) {
            tmpl.first_detail = e.detail;
        }
    }
    if (!stm.entries().empty()) {
        mtm.consumed_seq = std::max(mtm.consumed_seq, stm.entries().back().seq);
    }
    for (auto it = mtm.templates.begin(); it != mtm.templates.end();) {
        CallTemplate& tmpl = it->second;
        while (!tmpl.recent.empty() && tmpl.recent.front() <= clock - MediumTermMemory::kWindowS) {
            tmpl.recent.pop_front();
        }
        if (static_cast<int>(tmpl.recent.size()) < MediumTermMemory::kMinRatePerHour) {
            it = mtm.templates.erase(it);
        } else {
            ++it;
        }
    }
    mtm.last_consolidated = clock;
    return mtm;
}

// --- lifelong memory ----------------------------------------------------------

struct LifelongHint {
    std::string text;
    bool verified = false;
    std::string provenance;
};

struct LifelongMemory {
    std::vector<LifelongHint> hints;

    std::vector<std::string> verified_texts() const {
        std::vector<std::string> out;
        for (const LifelongHint& h : hints) {
            if (h.verified) {
                out.push_back(h.text);
            }
        }
        return out;
    }
};

// Line format: "VERIFIED<TAB><hint>". Anything else is kept out of the
// store and reported as a warning line.
inline LifelongMemory load_lifelong_memory(const std::string& path, std::vector<std::string>* warnings = nullptr) {
    LifelongMemory mem;
    std::ifstream in(path);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const std::string prefix = "VERIFIED\t";
        if (line.rfind(prefix, 0) == 0) {
            mem.hints.push_back({line.substr(prefix.size()), true, path + ":" + std::to_string(line_no)});
        } else if (warnings) {
            warnings->push_back(path + ":" + std::to_string(line_no) + ": unverified line ignored");
        }
    }
    return mem;
}

// --- retrieval ----------------------------------------------------------------

inline std::set<std::string> token_set(const std::string& text) {
    std::set<std::string> out;
    std::string cur;
    for (char c : text) {
        if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
            cur += c;
        } else if (c >= 'A' && c <= 'Z') {
            cur += static_cast<char>(c - 'A' + 'a');
        } else if (!cur.empty()) {
            out.insert(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) {
        out.insert(cur);
    }
    return out;
}

inline double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
    if (a.empty() && b.empty()) {
        return 0.0;
    }
    std::size_t inter = 0;
    for (const std::string& t : a) {
        if (b.count(t)) {
            ++inter;
        }
    }
    std::size_t uni = a.size() + b.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Top-k snippets across medium-term templates and short-term outcome
// entries, ranked by token-set similarity with the instruction; ties go to
// the more recent entry.
inline std::vector<std::string> rank_memory_snippets(const std::string& instruction, const ShortTermMemory& stm,
                                                     const MediumTermMemory& mtm, std::size_t k = 3) {
    struct Candidate {
        double score;
        double recency;
        std::string text;
    };
    std::set<std::string> query = token_set(instruction);
    std::vector<Candidate> candidates;
    for (const auto& [hash, tmpl] : mtm.templates) {
        double recency = tmpl.recent.empty() ? 0.0 : tmpl.recent.back();
        candidates.push_back({jaccard(query, token_set(tmpl.canonical)), recency,
                              tmpl.canonical + " (x" + std::to_string(tmpl.count) + ")"});
    }
    for (const MemoryEntry& e : stm.entries()) {
        if (e.kind != MemoryKind::Outcome) {
            continue;
        }
        candidates.push_back({jaccard(query, token_set(e.payload + " " + e.task_label)),
                              e.timestamp, e.payload});
    }
    std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) {
            return a.score > b.score;
        }
        return a.recency > b.recency;
    });
    std::vector<std::string> out;
    for (const Candidate& c : candidates) {
        if (out.size() >= k) {
            break;
        }
        out.push_back(c.text);
    }
    return out;
}

}  // namespace tasktree
