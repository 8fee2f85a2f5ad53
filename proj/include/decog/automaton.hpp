#ifndef DECOG_AUTOMATON_HPP
#define DECOG_AUTOMATON_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "decog/hmm.hpp"  // TokenId

namespace decog {

using StateId = std::uint32_t;

// Tokenization contract used when compiling template pivots; implemented by
// SymbolVocab and by every LanguageModel.
class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    virtual std::vector<TokenId> tokenize(const std::string& text) const = 0;
    virtual std::string detokenize(std::span<const TokenId> ids) const = 0;
    virtual std::uint32_t vocab_size() const = 0;
    virtual TokenId eos_id() const = 0;
};

// Whitespace-symbol tokenizer: token ids are indices into a symbol list.
class SymbolVocab : public Tokenizer {
public:
    SymbolVocab(std::vector<std::string> symbols, TokenId eos);

    std::vector<TokenId> tokenize(const std::string& text) const override;
    std::string detokenize(std::span<const TokenId> ids) const override;
    std::uint32_t vocab_size() const override { return static_cast<std::uint32_t>(symbols_.size()); }
    TokenId eos_id() const override { return eos_; }
    const std::vector<std::string>& symbols() const { return symbols_; }

private:
    std::vector<std::string> symbols_;
    TokenId eos_;
};

struct TemplateElement {
    enum class Kind { Pivot, Wildcard };
    Kind kind = Kind::Pivot;
    std::string text;            // pivot only
    std::uint32_t min_len = 0;   // wildcard only
    std::uint32_t max_len = 0;   // wildcard only

    static TemplateElement pivot(std::string t);
    static TemplateElement wildcard(std::uint32_t min_len, std::uint32_t max_len);
};

struct FormatTemplate {
    std::vector<TemplateElement> elements;
};

// A union of concatenation templates; the compiled DFA accepts exactly the
// union of the per-template languages. Wildcards range over every non-EOS
// token.
struct TemplateSpec {
    std::vector<FormatTemplate> templates;
};

TemplateSpec parse_template_spec(const std::string& json_text);
TemplateSpec load_template_spec(const std::string& path);

// Token-level DFA with sparse rows: one default edge per state plus an
// exception map, a single absorbing dead sink, and canonical BFS numbering.
struct Dfa {
    std::uint32_t num_states = 0;  // includes the dead sink
    std::uint32_t vocab_size = 0;
    StateId start = 0;
    StateId dead = 0;
    std::vector<std::uint8_t> accept;  // per state, 0/1

    struct Row {
        StateId default_target = 0;
        std::vector<std::pair<TokenId, StateId>> exceptions;  // sorted by token
    };
    std::vector<Row> rows;

    // Shortest accepting suffix length per state; dead only is unset.
    // Derived at compile/load time, not serialized.
    std::vector<std::optional<std::uint32_t>> min_remaining_tokens;

    bool is_accept(StateId s) const { return accept[s] != 0; }
    std::uint32_t live_states() const { return num_states - 1; }
    std::uint32_t accept_count() const;
};

struct CompileOptions {
    std::size_t state_budget = 1'000'000;
};

// Builds the position-tracking NFA over (template, element, offset) triples
// and determinizes it with memoized subset construction, so common prefixes
// share states and wildcard/pivot overlap is resolved declaratively.
Dfa compile_template(const TemplateSpec& spec, const Tokenizer& tokenizer,
                     const CompileOptions& opts = {});

StateId dfa_step(const Dfa& dfa, StateId state, TokenId token);

bool accepts(const Dfa& dfa, std::span<const TokenId> seq);

// Length of the shortest token sequence reaching an accept state, nullopt
// for the dead sink.
std::optional<std::uint32_t> min_remaining(const Dfa& dfa, StateId state);

void save_dfa(const Dfa& dfa, const std::string& path);
Dfa load_dfa(const std::string& path);

}  // namespace decog

#endif
