#include "decog/hmm.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <future>
#include <sstream>
#include <thread>

#include "decog/errors.hpp"
#include "decog/io_util.hpp"
#include "decog/logmath.hpp"
#include "decog/rng.hpp"
#include "json.hpp"

namespace decog {

namespace {

void check_row(std::span<const double> row, double tol, const std::string& what) {
    double sum = 0.0;
    for (double v : row) {
        if (std::isnan(v) || v > 1e-12)
            throw ConfigError(what + ": entry above 0 or NaN");
        sum += std::exp(v);
    }
    if (std::fabs(sum - 1.0) > tol)
        throw ConfigError(what + ": row exp-sum " + std::to_string(sum) + " not within tolerance of 1");
}

}  // namespace

void validate_hmm(const Hmm& hmm, double tol) {
    if (hmm.num_states == 0 || hmm.vocab_size == 0)
        throw ConfigError("hmm: num_states and vocab_size must be positive");
    if (hmm.eos_id >= hmm.vocab_size) throw ConfigError("hmm: eos_id out of range");
    const std::size_t h = hmm.num_states, v = hmm.vocab_size;
    if (hmm.initial.size() != h || hmm.transition.size() != h * h || hmm.emission.size() != h * v)
        throw ConfigError("hmm: parameter dimensions inconsistent");
    check_row(hmm.initial, tol, "initial");
    for (std::size_t z = 0; z < h; ++z) {
        check_row(std::span(hmm.transition).subspan(z * h, h), tol, "transition row");
        check_row(std::span(hmm.emission).subspan(z * v, v), tol, "emission row");
    }
}

ForwardVector forward_init(const Hmm& hmm) { return hmm.initial; }

ForwardVector forward_step(const Hmm& hmm, const ForwardVector& fwd, TokenId token) {
    if (token >= hmm.vocab_size) throw RangeError("forward_step: token id out of range");
    const std::size_t h = hmm.num_states;
    if (fwd.size() != h) throw RangeError("forward_step: forward vector has wrong length");
    ForwardVector out(h, kLogZero);
    std::vector<double> terms(h);
    for (std::size_t z2 = 0; z2 < h; ++z2) {
        for (std::size_t z = 0; z < h; ++z) terms[z] = fwd[z] + hmm.transition[z * h + z2];
        out[z2] = log_sum_exp(terms) + hmm.emit(static_cast<std::uint32_t>(z2), token);
    }
    return out;
}

double sequence_loglik(const Hmm& hmm, std::span<const TokenId> seq) {
    if (seq.empty()) return 0.0;
    ForwardVector fwd = forward_init(hmm);
    for (TokenId t : seq) fwd = forward_step(hmm, fwd, t);
    return log_sum_exp(fwd);
}

std::vector<TokenId> sample_sequence(const Hmm& hmm, std::size_t max_len, std::uint64_t seed) {
    if (max_len < 1) throw ConfigError("sample_sequence: max_len must be >= 1");
    std::mt19937_64 rng(seed);
    const std::size_t h = hmm.num_states, v = hmm.vocab_size;
    std::vector<double> probs(std::max(h, v));

    auto draw_row = [&](std::span<const double> logs) {
        double total = 0.0;
        for (std::size_t i = 0; i < logs.size(); ++i) {
            probs[i] = std::exp(logs[i]);
            total += probs[i];
        }
        return sample_index(std::span(probs.data(), logs.size()), total, rng);
    };

    std::vector<TokenId> out;
    std::size_t z = draw_row(hmm.initial);
    for (std::size_t t = 0; t < max_len; ++t) {
        z = draw_row(std::span(hmm.transition).subspan(z * h, h));
        const auto x = static_cast<TokenId>(draw_row(std::span(hmm.emission).subspan(z * v, v)));
        out.push_back(x);
        if (x == hmm.eos_id) break;
    }
    return out;
}

void save_corpus(const TokenCorpus& corpus, const std::string& path) {
    std::ostringstream ss;
    for (const auto& seq : corpus.sequences) {
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (i) ss << ' ';
            ss << seq[i];
        }
        ss << '\n';
    }
    io::atomic_write_file(path, ss.str());
}

TokenCorpus load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open corpus: " + path);
    TokenCorpus corpus;
    corpus.provenance = path;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::vector<TokenId> seq;
        long long id;
        while (ls >> id) {
            if (id < 0) throw FormatError("corpus line " + std::to_string(lineno) + ": negative token id");
            seq.push_back(static_cast<TokenId>(id));
        }
        if (!ls.eof())
            throw FormatError("corpus line " + std::to_string(lineno) + ": non-numeric token");
        if (!seq.empty()) corpus.sequences.push_back(std::move(seq));
    }
    return corpus;
}

void validate_corpus(const TokenCorpus& corpus, std::uint32_t vocab_size, TokenId eos_id) {
    for (std::size_t i = 0; i < corpus.sequences.size(); ++i) {
        const auto& seq = corpus.sequences[i];
        if (seq.empty()) throw FormatError("corpus sequence " + std::to_string(i) + " is empty");
        for (std::size_t t = 0; t < seq.size(); ++t) {
            if (seq[t] >= vocab_size)
                throw FormatError("corpus sequence " + std::to_string(i) + ": token id " +
                                  std::to_string(seq[t]) + " exceeds vocab size");
            if (seq[t] == eos_id && t + 1 != seq.size())
                throw FormatError("corpus sequence " + std::to_string(i) + ": EOS before final position");
        }
    }
}

namespace {

// Accumulated expectations for one sequence (probability space, scaled).
struct SeqStats {
    std::vector<double> init;    // h
    std::vector<double> trans;   // h*h
    std::vector<double> emit;    // h*V
    double loglik = 0.0;

    SeqStats(std::size_t h, std::size_t v) : init(h, 0.0), trans(h * h, 0.0), emit(h * v, 0.0) {}
};

// Scaled forward-backward for one sequence under the transition-then-emit
// convention: alpha_0 = pi over the silent start state, then each consumed
// token applies A followed by its emission column.
void estep_sequence(const Hmm& hmm, const std::vector<double>& pi, const std::vector<double>& a,
                    const std::vector<double>& b, std::span<const TokenId> seq, SeqStats& stats) {
    const std::size_t h = hmm.num_states, v = hmm.vocab_size;
    const std::size_t n = seq.size();

    std::vector<std::vector<double>> alpha(n + 1, std::vector<double>(h));
    std::vector<double> scale(n + 1, 1.0);
    alpha[0] = pi;
    for (std::size_t t = 1; t <= n; ++t) {
        const TokenId x = seq[t - 1];
        double total = 0.0;
        for (std::size_t z2 = 0; z2 < h; ++z2) {
            double s = 0.0;
            for (std::size_t z = 0; z < h; ++z) s += alpha[t - 1][z] * a[z * h + z2];
            const double val = s * b[z2 * v + x];
            alpha[t][z2] = val;
            total += val;
        }
        if (total <= 0.0)
            throw InternalError("baum_welch: zero-probability prefix during E-step");
        scale[t] = total;
        for (std::size_t z2 = 0; z2 < h; ++z2) alpha[t][z2] /= total;
        stats.loglik += std::log(total);
    }

    std::vector<double> beta(h, 1.0), beta_prev(h);
    for (std::size_t t = n; t >= 1; --t) {
        const TokenId x = seq[t - 1];
        // gamma_t and the transition expectations for step t.
        for (std::size_t z2 = 0; z2 < h; ++z2) {
            const double g = alpha[t][z2] * beta[z2];
            stats.emit[z2 * v + x] += g;
        }
        for (std::size_t z = 0; z < h; ++z) {
            const double az = alpha[t - 1][z];
            double bsum = 0.0;
            for (std::size_t z2 = 0; z2 < h; ++z2) {
                const double w = a[z * h + z2] * b[z2 * v + x] * beta[z2];
                if (az != 0.0) stats.trans[z * h + z2] += az * w / scale[t];
                bsum += w;
            }
            beta_prev[z] = bsum / scale[t];
        }
        beta.swap(beta_prev);
    }
    for (std::size_t z = 0; z < h; ++z) stats.init[z] += alpha[0][z] * beta[z];
}

void normalize_rows(std::vector<double>& m, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) sum += m[r * cols + c];
        if (sum <= 0.0) {
            // starved row: fall back to uniform so the model stays valid
            for (std::size_t c = 0; c < cols; ++c) m[r * cols + c] = 1.0 / double(cols);
        } else {
            for (std::size_t c = 0; c < cols; ++c) m[r * cols + c] /= sum;
        }
    }
}

void floor_rows(std::vector<double>& m, std::size_t rows, std::size_t cols, double floor) {
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c)
            m[r * cols + c] = std::max(m[r * cols + c], floor);
    }
    normalize_rows(m, rows, cols);
}

void to_log(const std::vector<double>& probs, std::vector<double>& logs) {
    logs.resize(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i)
        logs[i] = probs[i] > 0.0 ? std::log(probs[i]) : kLogZero;
}

}  // namespace

TrainResult baum_welch_train(const TokenCorpus& corpus, std::uint32_t vocab_size, TokenId eos_id,
                             const TrainOptions& opts) {
    if (corpus.sequences.empty()) throw ConfigError("baum_welch: empty corpus");
    if (opts.num_states < 1) throw ConfigError("baum_welch: num_states must be >= 1");
    if (!(opts.emission_floor > 0.0) || opts.emission_floor > 1e-6)
        throw ConfigError("baum_welch: emission floor must be in (0, 1e-6]");
    validate_corpus(corpus, vocab_size, eos_id);

    const std::size_t h = opts.num_states, v = vocab_size;

    // Seeded uniform-random positive rows, normalized; floor the emissions so
    // the support invariant holds from the start.
    std::mt19937_64 rng(opts.seed);
    std::vector<double> pi(h), a(h * h), b(h * v);
    auto fill = [&](std::vector<double>& m) {
        for (double& x : m) x = uniform01(rng) + 1e-3;
    };
    fill(pi);
    fill(a);
    fill(b);
    normalize_rows(pi, 1, h);
    normalize_rows(a, h, h);
    floor_rows(b, h, v, opts.emission_floor);

    Hmm model;
    model.num_states = static_cast<std::uint32_t>(h);
    model.vocab_size = vocab_size;
    model.eos_id = eos_id;

    const std::size_t nseq = corpus.sequences.size();
    unsigned threads = opts.threads ? opts.threads : std::thread::hardware_concurrency();
    threads = std::clamp<unsigned>(threads, 1, 16);

    TrainResult result;
    for (std::uint32_t epoch = 0; epoch < opts.epochs; ++epoch) {
        SeqStats total(h, v);

        // Per-sequence statistics computed independently (possibly in
        // parallel) and merged in ascending sequence index, so the reduction
        // order is fixed regardless of thread count.
        const std::size_t batch = 64;
        std::vector<SeqStats> blocks;
        for (std::size_t base = 0; base < nseq; base += batch) {
            const std::size_t count = std::min(batch, nseq - base);
            blocks.assign(count, SeqStats(h, v));
            if (threads <= 1 || count == 1) {
                for (std::size_t i = 0; i < count; ++i)
                    estep_sequence(model, pi, a, b, corpus.sequences[base + i], blocks[i]);
            } else {
                std::vector<std::future<void>> futs;
                std::atomic<std::size_t> next{0};
                for (unsigned w = 0; w < threads; ++w) {
                    futs.push_back(std::async(std::launch::async, [&] {
                        for (;;) {
                            const std::size_t i = next.fetch_add(1);
                            if (i >= count) return;
                            estep_sequence(model, pi, a, b, corpus.sequences[base + i], blocks[i]);
                        }
                    }));
                }
                for (auto& f : futs) f.get();
            }
            for (std::size_t i = 0; i < count; ++i) {
                const SeqStats& s = blocks[i];
                total.loglik += s.loglik;
                for (std::size_t j = 0; j < s.init.size(); ++j) total.init[j] += s.init[j];
                for (std::size_t j = 0; j < s.trans.size(); ++j) total.trans[j] += s.trans[j];
                for (std::size_t j = 0; j < s.emit.size(); ++j) total.emit[j] += s.emit[j];
            }
        }

        result.loglik_trace.push_back(total.loglik);
        if (epoch >= 1) {
            const double prev = result.loglik_trace[epoch - 1];
            const double rel = std::fabs((total.loglik - prev) / std::max(1.0, std::fabs(prev)));
            if (rel < opts.rel_tol) break;  // converged; keep the params that scored this value
        }

        pi = total.init;
        a = total.trans;
        b = total.emit;
        normalize_rows(pi, 1, h);
        normalize_rows(a, h, h);
        floor_rows(b, h, v, opts.emission_floor);
    }

    to_log(pi, model.initial);
    to_log(a, model.transition);
    to_log(b, model.emission);
    validate_hmm(model);
    result.hmm = std::move(model);
    return result;
}

namespace {

constexpr char kHmmMagic[4] = {'D', 'G', 'H', '1'};

}  // namespace

void save_hmm(const Hmm& hmm, const std::string& path) {
    io::ByteWriter payload;
    payload.u32(1);
    payload.u32(hmm.num_states);
    payload.u32(hmm.vocab_size);
    payload.u32(hmm.eos_id);
    for (double x : hmm.initial) payload.f64(x);
    for (double x : hmm.transition) payload.f64(x);
    for (double x : hmm.emission) payload.f64(x);

    io::ByteWriter out;
    out.raw(kHmmMagic, 4);
    out.raw(payload.bytes().data(), payload.size());
    out.u32(io::crc32(payload.bytes().data(), payload.size()));
    io::atomic_write_file(path, out.bytes());
}

void save_hmm_json(const Hmm& hmm, const std::string& path) {
    nlohmann::json j;
    j["version"] = 1;
    j["num_states"] = hmm.num_states;
    j["vocab_size"] = hmm.vocab_size;
    j["eos_id"] = hmm.eos_id;
    j["initial"] = hmm.initial;
    auto nest = [&](const std::vector<double>& flat, std::size_t cols) {
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t r = 0; r * cols < flat.size(); ++r)
            rows.push_back(std::vector<double>(flat.begin() + r * cols, flat.begin() + (r + 1) * cols));
        return rows;
    };
    j["transition"] = nest(hmm.transition, hmm.num_states);
    j["emission"] = nest(hmm.emission, hmm.vocab_size);
    io::atomic_write_file(path, j.dump());
}

namespace {

Hmm load_hmm_json(const std::string& text, const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("hmm json " + path + ": " + e.what());
    }
    try {
        Hmm hmm;
        if (j.at("version").get<int>() != 1) throw FormatError("hmm json " + path + ": unsupported version");
        hmm.num_states = j.at("num_states").get<std::uint32_t>();
        hmm.vocab_size = j.at("vocab_size").get<std::uint32_t>();
        if (hmm.vocab_size > 1024)
            throw FormatError("hmm json " + path + ": vocab too large for the JSON variant");
        hmm.eos_id = j.at("eos_id").get<TokenId>();
        hmm.initial = j.at("initial").get<std::vector<double>>();
        for (const auto& row : j.at("transition"))
            for (double x : row.get<std::vector<double>>()) hmm.transition.push_back(x);
        for (const auto& row : j.at("emission"))
            for (double x : row.get<std::vector<double>>()) hmm.emission.push_back(x);
        try {
            validate_hmm(hmm);
        } catch (const ConfigError& e) {
            throw FormatError("hmm json " + path + ": " + e.what());
        }
        return hmm;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("hmm json " + path + ": " + e.what());
    }
}

}  // namespace

Hmm load_hmm(const std::string& path) {
    const std::string data = io::read_file(path);
    if (data.size() < 4 || std::memcmp(data.data(), kHmmMagic, 4) != 0) {
        // JSON variant fallback for small vocabularies
        if (!data.empty() && (data[0] == '{' || data[0] == ' ' || data[0] == '\n'))
            return load_hmm_json(data, path);
        throw FormatError("hmm " + path + ": bad magic");
    }
    if (data.size() < 8) throw FormatError("hmm " + path + ": truncated");
    const std::size_t payload_size = data.size() - 8;
    io::ByteReader crc_rd(data.data() + 4 + payload_size, 4, "hmm " + path);
    const std::uint32_t stored_crc = crc_rd.u32();
    if (io::crc32(data.data() + 4, payload_size) != stored_crc)
        throw FormatError("hmm " + path + ": CRC mismatch");

    io::ByteReader rd(data.data() + 4, payload_size, "hmm " + path);
    Hmm hmm;
    const std::uint32_t version = rd.u32();
    if (version != 1) throw FormatError("hmm " + path + ": unsupported version " + std::to_string(version));
    hmm.num_states = rd.u32();
    hmm.vocab_size = rd.u32();
    hmm.eos_id = rd.u32();
    if (hmm.num_states == 0 || hmm.vocab_size == 0 || hmm.eos_id >= hmm.vocab_size)
        throw FormatError("hmm " + path + ": invalid header");
    const std::size_t h = hmm.num_states, v = hmm.vocab_size;
    const std::size_t expect = (h + h * h + h * v) * 8;
    if (rd.remaining() != expect)
        throw FormatError("hmm " + path + ": payload size mismatch");
    hmm.initial.resize(h);
    hmm.transition.resize(h * h);
    hmm.emission.resize(h * v);
    for (double& x : hmm.initial) x = rd.f64();
    for (double& x : hmm.transition) x = rd.f64();
    for (double& x : hmm.emission) x = rd.f64();
    try {
        validate_hmm(hmm);
    } catch (const ConfigError& e) {
        throw FormatError("hmm " + path + ": " + e.what());
    }
    return hmm;
}

}  // namespace decog
