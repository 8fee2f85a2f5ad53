#include "decog/automaton.hpp"

#include <algorithm>
#include <cstring>
#include <deque>
#include <map>
#include <sstream>
#include <unordered_map>

#include "decog/errors.hpp"
#include "decog/io_util.hpp"
#include "json.hpp"

namespace decog {

SymbolVocab::SymbolVocab(std::vector<std::string> symbols, TokenId eos)
    : symbols_(std::move(symbols)), eos_(eos) {
    if (symbols_.empty()) throw ConfigError("vocab: empty symbol list");
    if (eos_ >= symbols_.size()) throw ConfigError("vocab: eos id out of range");
}

std::vector<TokenId> SymbolVocab::tokenize(const std::string& text) const {
    std::istringstream ss(text);
    std::vector<TokenId> ids;
    std::string sym;
    while (ss >> sym) {
        auto it = std::find(symbols_.begin(), symbols_.end(), sym);
        if (it == symbols_.end()) throw ConfigError("vocab: unknown symbol '" + sym + "'");
        ids.push_back(static_cast<TokenId>(it - symbols_.begin()));
    }
    return ids;
}

std::string SymbolVocab::detokenize(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= symbols_.size()) throw RangeError("vocab: token id out of range");
        if (i) out += ' ';
        out += symbols_[ids[i]];
    }
    return out;
}

TemplateElement TemplateElement::pivot(std::string t) {
    TemplateElement e;
    e.kind = Kind::Pivot;
    e.text = std::move(t);
    return e;
}

TemplateElement TemplateElement::wildcard(std::uint32_t min_len, std::uint32_t max_len) {
    TemplateElement e;
    e.kind = Kind::Wildcard;
    e.min_len = min_len;
    e.max_len = max_len;
    return e;
}

TemplateSpec parse_template_spec(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("template spec: ") + e.what());
    }
    TemplateSpec spec;
    try {
        for (const auto& jt : j.at("templates")) {
            FormatTemplate tpl;
            for (const auto& je : jt.at("elements")) {
                const std::string kind = je.at("kind").get<std::string>();
                if (kind == "pivot") {
                    tpl.elements.push_back(TemplateElement::pivot(je.at("text").get<std::string>()));
                } else if (kind == "wildcard") {
                    tpl.elements.push_back(TemplateElement::wildcard(je.at("min").get<std::uint32_t>(),
                                                                     je.at("max").get<std::uint32_t>()));
                } else {
                    throw FormatError("template spec: unknown element kind '" + kind + "'");
                }
            }
            spec.templates.push_back(std::move(tpl));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("template spec: ") + e.what());
    }
    return spec;
}

TemplateSpec load_template_spec(const std::string& path) {
    return parse_template_spec(io::read_file(path));
}

namespace {

// Tokenized template, with positions flattened to dense ids. A position is
// (template, element, offset); offset counts consumed tokens within the
// element. One extra "end" position per template marks completion.
struct CompiledElement {
    bool is_wildcard = false;
    std::vector<TokenId> tokens;  // pivot
    std::uint32_t min_len = 0, max_len = 0;

    std::uint32_t span() const {
        return is_wildcard ? max_len : static_cast<std::uint32_t>(tokens.size());
    }
};

struct CompiledTemplate {
    std::vector<CompiledElement> elements;
    std::vector<std::uint32_t> elem_base;  // position-id base per element, plus end
    std::uint32_t base = 0;
};

struct PositionTable {
    std::vector<CompiledTemplate> templates;
    std::uint32_t total = 0;

    struct Decoded {
        std::uint32_t tpl, elem, off;
    };

    std::uint32_t encode(std::uint32_t t, std::uint32_t e, std::uint32_t off) const {
        return templates[t].base + templates[t].elem_base[e] + off;
    }
    std::uint32_t end_pos(std::uint32_t t) const {
        return templates[t].base + templates[t].elem_base[templates[t].elements.size()];
    }
    Decoded decode(std::uint32_t pos) const {
        std::uint32_t t = 0;
        while (t + 1 < templates.size() && templates[t + 1].base <= pos) ++t;
        const auto& ct = templates[t];
        std::uint32_t rel = pos - ct.base;
        std::uint32_t e = 0;
        while (e + 1 <= ct.elements.size() && ct.elem_base[e + 1] <= rel) ++e;
        return {t, e, rel - ct.elem_base[e]};
    }
};

using PosSet = std::vector<std::uint32_t>;  // sorted, unique

struct PosSetHash {
    std::size_t operator()(const PosSet& s) const {
        std::size_t h = 1469598103934665603ull;
        for (std::uint32_t v : s) {
            h ^= v;
            h *= 1099511628211ull;
        }
        return h;
    }
};

void sort_unique(PosSet& s) {
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
}

// Epsilon closure: a completed element also activates the start of the next
// one, chaining through zero-length wildcards up to the template end marker.
PosSet closure(const PositionTable& table, PosSet set) {
    for (std::size_t i = 0; i < set.size(); ++i) {
        const auto d = table.decode(set[i]);
        const auto& tpl = table.templates[d.tpl];
        if (d.elem >= tpl.elements.size()) continue;  // end marker
        const auto& el = tpl.elements[d.elem];
        const bool complete = el.is_wildcard ? d.off >= el.min_len : d.off == el.tokens.size();
        if (complete) {
            const std::uint32_t next = table.encode(d.tpl, d.elem + 1, 0);  // may be the end marker
            if (std::find(set.begin(), set.end(), next) == set.end()) set.push_back(next);
        }
    }
    sort_unique(set);
    return set;
}

struct ProtoState {
    Dfa::Row row;
    bool accept = false;
};

// Content tokens that actually resolve through the default edge; EOS counts
// as an exception whenever the row lists it.
std::uint32_t default_content_coverage(const Dfa::Row& row, std::uint32_t vocab, TokenId eos) {
    std::uint32_t covered = vocab - 1;  // non-EOS tokens
    for (const auto& [tok, tgt] : row.exceptions)
        if (tok != eos) --covered;
    return covered;
}

std::vector<std::optional<std::uint32_t>> shortest_accepting_suffix(
    const std::vector<Dfa::Row>& rows, const std::vector<std::uint8_t>& accept, StateId dead,
    std::uint32_t vocab, TokenId eos) {
    const std::size_t n = rows.size();
    // reverse adjacency over edges traversable by at least one content token
    std::vector<std::vector<StateId>> rev(n);
    for (StateId s = 0; s < n; ++s) {
        if (s == dead) continue;
        for (const auto& [tok, tgt] : rows[s].exceptions)
            if (tok != eos) rev[tgt].push_back(s);
        if (default_content_coverage(rows[s], vocab, eos) > 0)
            rev[rows[s].default_target].push_back(s);
    }
    std::vector<std::optional<std::uint32_t>> dist(n);
    std::deque<StateId> queue;
    for (StateId s = 0; s < n; ++s) {
        if (accept[s] && s != dead) {
            dist[s] = 0;
            queue.push_back(s);
        }
    }
    while (!queue.empty()) {
        const StateId s = queue.front();
        queue.pop_front();
        for (StateId p : rev[s]) {
            if (p == dead || dist[p]) continue;
            dist[p] = *dist[s] + 1;
            queue.push_back(p);
        }
    }
    dist[dead].reset();
    return dist;
}

}  // namespace

Dfa compile_template(const TemplateSpec& spec, const Tokenizer& tokenizer,
                     const CompileOptions& opts) {
    if (spec.templates.empty()) throw ConfigError("template spec: no templates");
    const std::uint32_t vocab = tokenizer.vocab_size();
    const TokenId eos = tokenizer.eos_id();

    PositionTable table;
    for (const auto& tpl : spec.templates) {
        if (tpl.elements.empty()) throw ConfigError("template spec: template with no elements");
        CompiledTemplate ct;
        ct.base = table.total;
        std::uint32_t rel = 0;
        for (const auto& el : tpl.elements) {
            CompiledElement ce;
            if (el.kind == TemplateElement::Kind::Pivot) {
                ce.tokens = tokenizer.tokenize(el.text);
                if (ce.tokens.empty())
                    throw ConfigError("template spec: pivot tokenizes to empty: '" + el.text + "'");
                for (TokenId t : ce.tokens) {
                    if (t >= vocab) throw ConfigError("template spec: pivot token id out of range");
                    if (t == eos) throw ConfigError("template spec: pivot contains the EOS token");
                }
            } else {
                if (el.min_len > el.max_len)
                    throw ConfigError("template spec: wildcard min exceeds max");
                ce.is_wildcard = true;
                ce.min_len = el.min_len;
                ce.max_len = el.max_len;
            }
            ct.elem_base.push_back(rel);
            rel += ce.span() + 1;
            ct.elements.push_back(std::move(ce));
        }
        ct.elem_base.push_back(rel);  // end marker position
        table.total += rel + 1;
        table.templates.push_back(std::move(ct));
    }

    // Subset construction. The empty subset is the dead sink and is handled
    // like any other state: it has no moves, so it is trivially absorbing.
    std::unordered_map<PosSet, StateId, PosSetHash> memo;
    std::vector<PosSet> subsets;
    std::vector<ProtoState> proto;
    std::deque<StateId> work;

    auto intern = [&](PosSet set) -> StateId {
        auto it = memo.find(set);
        if (it != memo.end()) return it->second;
        if (subsets.size() >= opts.state_budget)
            throw CapacityError("template compile: state budget exceeded (" +
                                std::to_string(opts.state_budget) + ")");
        const StateId id = static_cast<StateId>(subsets.size());
        memo.emplace(set, id);
        subsets.push_back(std::move(set));
        proto.emplace_back();
        work.push_back(id);
        return id;
    };

    PosSet start_set;
    for (std::uint32_t t = 0; t < table.templates.size(); ++t)
        start_set.push_back(table.encode(t, 0, 0));
    sort_unique(start_set);
    const StateId start = intern(closure(table, std::move(start_set)));
    const StateId dead_proto = intern(PosSet{});

    while (!work.empty()) {
        const StateId sid = work.front();
        work.pop_front();
        const PosSet set = subsets[sid];  // copy: intern() may reallocate

        PosSet default_moves;
        std::map<TokenId, PosSet> pivot_moves;
        bool accept = false;
        for (std::uint32_t pos : set) {
            const auto d = table.decode(pos);
            const auto& tpl = table.templates[d.tpl];
            if (d.elem >= tpl.elements.size()) {
                accept = true;
                continue;
            }
            const auto& el = tpl.elements[d.elem];
            if (el.is_wildcard) {
                if (d.off < el.max_len) default_moves.push_back(table.encode(d.tpl, d.elem, d.off + 1));
            } else if (d.off < el.tokens.size()) {
                pivot_moves[el.tokens[d.off]].push_back(table.encode(d.tpl, d.elem, d.off + 1));
            }
        }
        sort_unique(default_moves);
        const PosSet default_succ = closure(table, default_moves);
        const StateId default_id = intern(default_succ);

        ProtoState& ps = proto[sid];
        ps.accept = accept;
        ps.row.default_target = default_id;
        for (const auto& [tok, moves] : pivot_moves) {
            PosSet merged = default_moves;
            merged.insert(merged.end(), moves.begin(), moves.end());
            sort_unique(merged);
            PosSet succ = closure(table, std::move(merged));
            if (succ != default_succ)
                ps.row.exceptions.emplace_back(tok, intern(std::move(succ)));
        }
        // Wildcards never match EOS, so any live default edge needs an
        // explicit EOS escape to the sink.
        if (default_id != dead_proto)
            ps.row.exceptions.emplace_back(eos, dead_proto);
        std::sort(ps.row.exceptions.begin(), ps.row.exceptions.end());
    }

    // Collapse states that cannot reach an accept state into the sink.
    std::vector<std::uint8_t> proto_accept(proto.size());
    std::vector<Dfa::Row> proto_rows(proto.size());
    for (StateId s = 0; s < proto.size(); ++s) {
        proto_accept[s] = proto[s].accept ? 1 : 0;
        proto_rows[s] = proto[s].row;
    }
    auto dist = shortest_accepting_suffix(proto_rows, proto_accept, dead_proto, vocab, eos);
    auto collapse = [&](StateId s) { return (s != dead_proto && dist[s]) ? s : dead_proto; };

    // Canonical renumbering: BFS from the start state, exceptions in token
    // order before the default edge; the sink gets the final index.
    const StateId unassigned = static_cast<StateId>(-1);
    std::vector<StateId> renum(proto.size(), unassigned);
    std::vector<StateId> order;
    if (collapse(start) != dead_proto) {
        std::deque<StateId> bfs;
        renum[start] = 0;
        order.push_back(start);
        bfs.push_back(start);
        while (!bfs.empty()) {
            const StateId s = bfs.front();
            bfs.pop_front();
            auto visit = [&](StateId raw) {
                const StateId t = collapse(raw);
                if (t == dead_proto || renum[t] != unassigned) return;
                renum[t] = static_cast<StateId>(order.size());
                order.push_back(t);
                bfs.push_back(t);
            };
            for (const auto& [tok, tgt] : proto_rows[s].exceptions) visit(tgt);
            visit(proto_rows[s].default_target);
        }
    }

    Dfa dfa;
    dfa.vocab_size = vocab;
    dfa.num_states = static_cast<std::uint32_t>(order.size()) + 1;
    dfa.dead = static_cast<StateId>(order.size());
    dfa.start = collapse(start) == dead_proto ? dfa.dead : renum[start];
    dfa.accept.assign(dfa.num_states, 0);
    dfa.rows.resize(dfa.num_states);

    auto final_id = [&](StateId raw) {
        const StateId t = collapse(raw);
        return t == dead_proto ? dfa.dead : renum[t];
    };
    for (StateId idx = 0; idx < order.size(); ++idx) {
        const StateId s = order[idx];
        dfa.accept[idx] = proto_accept[s];
        Dfa::Row row;
        row.default_target = final_id(proto_rows[s].default_target);
        for (const auto& [tok, tgt] : proto_rows[s].exceptions) {
            const StateId t = final_id(tgt);
            if (t != row.default_target) row.exceptions.emplace_back(tok, t);
        }
        dfa.rows[idx] = std::move(row);
    }
    dfa.rows[dfa.dead].default_target = dfa.dead;

    dfa.min_remaining_tokens =
        shortest_accepting_suffix(dfa.rows, dfa.accept, dfa.dead, vocab, eos);
    return dfa;
}

std::uint32_t Dfa::accept_count() const {
    std::uint32_t n = 0;
    for (std::uint8_t a : accept) n += a;
    return n;
}

StateId dfa_step(const Dfa& dfa, StateId state, TokenId token) {
    if (state >= dfa.num_states) throw RangeError("dfa_step: state out of range");
    if (token >= dfa.vocab_size) throw RangeError("dfa_step: token out of range");
    const Dfa::Row& row = dfa.rows[state];
    auto it = std::lower_bound(row.exceptions.begin(), row.exceptions.end(),
                               std::make_pair(token, StateId{0}),
                               [](const auto& a, const auto& b) { return a.first < b.first; });
    if (it != row.exceptions.end() && it->first == token) return it->second;
    return row.default_target;
}

bool accepts(const Dfa& dfa, std::span<const TokenId> seq) {
    StateId s = dfa.start;
    for (TokenId t : seq) s = dfa_step(dfa, s, t);
    return dfa.is_accept(s);
}

std::optional<std::uint32_t> min_remaining(const Dfa& dfa, StateId state) {
    if (state >= dfa.num_states) throw RangeError("min_remaining: state out of range");
    return dfa.min_remaining_tokens[state];
}

namespace {
constexpr char kDfaMagic[4] = {'D', 'G', 'D', '1'};
}

void save_dfa(const Dfa& dfa, const std::string& path) {
    io::ByteWriter payload;
    payload.u32(1);
    payload.u32(dfa.num_states);
    payload.u32(dfa.vocab_size);
    payload.u32(dfa.start);
    payload.u32(dfa.dead);
    std::vector<std::uint8_t> bits((dfa.num_states + 7) / 8, 0);
    for (StateId s = 0; s < dfa.num_states; ++s)
        if (dfa.accept[s]) bits[s / 8] |= static_cast<std::uint8_t>(1u << (s % 8));
    payload.raw(bits.data(), bits.size());
    for (StateId s = 0; s < dfa.num_states; ++s) {
        const auto& row = dfa.rows[s];
        payload.u32(row.default_target);
        payload.u32(static_cast<std::uint32_t>(row.exceptions.size()));
        for (const auto& [tok, tgt] : row.exceptions) {
            payload.u32(tok);
            payload.u32(tgt);
        }
    }
    io::ByteWriter out;
    out.raw(kDfaMagic, 4);
    out.raw(payload.bytes().data(), payload.size());
    out.u32(io::crc32(payload.bytes().data(), payload.size()));
    io::atomic_write_file(path, out.bytes());
}

Dfa load_dfa(const std::string& path) {
    const std::string data = io::read_file(path);
    if (data.size() < 8 || std::memcmp(data.data(), kDfaMagic, 4) != 0)
        throw FormatError("dfa " + path + ": bad magic");
    const std::size_t payload_size = data.size() - 8;
    io::ByteReader crc_rd(data.data() + 4 + payload_size, 4, "dfa " + path);
    if (io::crc32(data.data() + 4, payload_size) != crc_rd.u32())
        throw FormatError("dfa " + path + ": CRC mismatch");

    io::ByteReader rd(data.data() + 4, payload_size, "dfa " + path);
    Dfa dfa;
    const std::uint32_t version = rd.u32();
    if (version != 1) throw FormatError("dfa " + path + ": unsupported version");
    dfa.num_states = rd.u32();
    dfa.vocab_size = rd.u32();
    dfa.start = rd.u32();
    dfa.dead = rd.u32();
    if (dfa.num_states == 0 || dfa.vocab_size == 0 || dfa.start >= dfa.num_states ||
        dfa.dead >= dfa.num_states)
        throw FormatError("dfa " + path + ": invalid header");

    std::vector<std::uint8_t> bits((dfa.num_states + 7) / 8);
    rd.raw(bits.data(), bits.size());
    dfa.accept.assign(dfa.num_states, 0);
    for (std::uint32_t i = 0; i < bits.size() * 8; ++i) {
        const bool set = (bits[i / 8] >> (i % 8)) & 1;
        if (i < dfa.num_states)
            dfa.accept[i] = set ? 1 : 0;
        else if (set)
            throw FormatError("dfa " + path + ": accept bit set beyond state count");
    }
    if (dfa.accept[dfa.dead]) throw FormatError("dfa " + path + ": dead state marked accepting");

    dfa.rows.resize(dfa.num_states);
    for (StateId s = 0; s < dfa.num_states; ++s) {
        Dfa::Row& row = dfa.rows[s];
        row.default_target = rd.u32();
        if (row.default_target >= dfa.num_states)
            throw FormatError("dfa " + path + ": edge target out of range");
        const std::uint32_t n = rd.u32();
        if (n > dfa.vocab_size) throw FormatError("dfa " + path + ": exception count exceeds vocab");
        TokenId prev_tok = 0;
        for (std::uint32_t i = 0; i < n; ++i) {
            const TokenId tok = rd.u32();
            const StateId tgt = rd.u32();
            if (tok >= dfa.vocab_size || tgt >= dfa.num_states)
                throw FormatError("dfa " + path + ": exception out of range");
            if (i > 0 && tok <= prev_tok)
                throw FormatError("dfa " + path + ": exceptions not strictly sorted");
            prev_tok = tok;
            row.exceptions.emplace_back(tok, tgt);
        }
    }
    if (rd.remaining() != 0) throw FormatError("dfa " + path + ": trailing bytes");
    const Dfa::Row& dead_row = dfa.rows[dfa.dead];
    if (dead_row.default_target != dfa.dead || !dead_row.exceptions.empty())
        throw FormatError("dfa " + path + ": dead state is not absorbing");

    // EOS id is not part of the DFA file; shortest suffix lengths here treat
    // every token as content, which matches compile output because live rows
    // always carry an explicit EOS exception to the sink.
    dfa.min_remaining_tokens =
        shortest_accepting_suffix(dfa.rows, dfa.accept, dfa.dead, dfa.vocab_size,
                                  static_cast<TokenId>(dfa.vocab_size));
    return dfa;
}

}  // namespace decog
