#include "elm/proxy_tasks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "elm/optimizer.hpp"
#include "elm/rng.hpp"
#include "elm/vocabulary.hpp"

namespace elm::proxy {

namespace {

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

int content_token(const CorpusSpec& spec, Rng& rng) {
    return vocab::kFirstContent + static_cast<int>(rng.below(spec.vocab_size - vocab::kFirstContent));
}

// `length` tokens of grammar output using only the motifs in `allowed`.
std::vector<int> grammar(const CorpusSpec& spec, const std::vector<std::vector<int>>& motifs,
                         const std::vector<int>& allowed, int length, Rng& rng) {
    std::vector<int> out;
    out.reserve(length);
    while (static_cast<int>(out.size()) < length) {
        const int remaining = length - static_cast<int>(out.size());
        if (!allowed.empty() && remaining >= spec.motif_len && rng.bernoulli(spec.motif_prob)) {
            const auto& m = motifs[allowed[rng.below(allowed.size())]];
            out.insert(out.end(), m.begin(), m.end());
        } else {
            out.push_back(content_token(spec, rng));
        }
    }
    return out;
}

int count_occurrences(std::span<const int> tokens, std::span<const int> motif) {
    int n = 0;
    if (motif.empty() || motif.size() > tokens.size()) return 0;
    for (std::size_t i = 0; i + motif.size() <= tokens.size(); ++i) {
        n += std::equal(motif.begin(), motif.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i));
    }
    return n;
}

// Breaks every occurrence of `motif` by resampling its first token.
void scrub(std::vector<int>& tokens, std::span<const int> motif, const CorpusSpec& spec, Rng& rng) {
    for (bool again = true; again;) {
        again = false;
        for (std::size_t i = 0; i + motif.size() <= tokens.size(); ++i) {
            if (std::equal(motif.begin(), motif.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i))) {
                int t;
                do t = content_token(spec, rng);
                while (t == motif[0]);
                tokens[i] = t;
                again = true;
            }
        }
    }
}

std::vector<int> without(int n, std::initializer_list<int> excluded) {
    std::vector<int> out;
    for (int i = 0; i < n; ++i) {
        if (std::find(excluded.begin(), excluded.end(), i) == excluded.end()) out.push_back(i);
    }
    return out;
}

// `motif` with one position replaced, so it shares all but one token with it.
std::vector<int> near_miss(std::span<const int> motif, const CorpusSpec& spec, Rng& rng) {
    std::vector<int> out(motif.begin(), motif.end());
    const auto i = rng.below(out.size());
    int t;
    do t = content_token(spec, rng);
    while (t == motif[i]);
    out[i] = t;
    return out;
}

void place(std::vector<int>& body, std::span<const int> pattern, std::size_t at) {
    std::copy(pattern.begin(), pattern.end(), body.begin() + static_cast<std::ptrdiff_t>(at));
}

// Two non-overlapping start offsets for patterns of length `len` in `n` slots.
std::pair<std::size_t, std::size_t> two_slots(std::size_t n, std::size_t len, Rng& rng) {
    for (;;) {
        const auto a = rng.below(n - len + 1);
        const auto b = rng.below(n - len + 1);
        if (a + len <= b || b + len <= a) return {a, b};
    }
}

// Positives hold the detection motif, negatives a one-token near miss of it.
Example make_detection(const SyntheticCorpus& c, int label, Rng& rng) {
    const auto& spec = c.spec;
    const auto& motif = c.motifs[0];
    for (;;) {
        std::vector<int> body = grammar(spec, c.motifs, without(spec.num_motifs, {0, 1}), spec.seq_len - 1, rng);
        scrub(body, motif, spec, rng);
        const auto p = rng.below(body.size() - motif.size() + 1);
        place(body, label == 1 ? motif : near_miss(motif, spec, rng), p);
        if (contains_motif(body, motif) != (label == 1)) continue;
        Example ex;
        ex.tokens.push_back(vocab::kCls);
        ex.tokens.insert(ex.tokens.end(), body.begin(), body.end());
        ex.label = label;
        return ex;
    }
}

// Negatives replace a random fraction of the second half.
Example make_pair(const SyntheticCorpus& c, int label, Rng& rng) {
    const auto& spec = c.spec;
    const int half = (spec.seq_len - 2) / 2;
    const auto first = grammar(spec, c.motifs, without(spec.num_motifs, {}), half, rng);
    auto second = first;
    if (label == 0) {
        const int edits = std::max(1, static_cast<int>(rng.below(half / 2 + 1)));
        std::vector<int> positions(half);
        std::iota(positions.begin(), positions.end(), 0);
        shuffle(positions, rng);
        for (int e = 0; e < edits; ++e) {
            int t;
            do t = content_token(spec, rng);
            while (t == first[positions[e]]);
            second[positions[e]] = t;
        }
    }
    Example ex;
    ex.tokens.push_back(vocab::kCls);
    ex.tokens.insert(ex.tokens.end(), first.begin(), first.end());
    ex.tokens.push_back(vocab::kSep);
    ex.tokens.insert(ex.tokens.end(), second.begin(), second.end());
    while (static_cast<int>(ex.tokens.size()) < spec.seq_len) ex.tokens.push_back(vocab::kSep);
    ex.label = label;
    return ex;
}

// One exact copy of the span motif plus, when it fits, a near-miss decoy.
Example make_span(const SyntheticCorpus& c, Rng& rng) {
    const auto& spec = c.spec;
    const auto& motif = c.motifs[1];
    for (;;) {
        std::vector<int> body = grammar(spec, c.motifs, without(spec.num_motifs, {1}), spec.seq_len - 1, rng);
        scrub(body, motif, spec, rng);
        std::size_t p;
        if (body.size() >= 2 * motif.size()) {
            const auto [a, b] = two_slots(body.size(), motif.size(), rng);
            place(body, near_miss(motif, spec, rng), b);
            p = a;
        } else {
            p = rng.below(body.size() - motif.size() + 1);
        }
        place(body, motif, p);
        if (count_occurrences(body, motif) != 1) continue;
        Example ex;
        ex.tokens.push_back(vocab::kCls);
        ex.tokens.insert(ex.tokens.end(), body.begin(), body.end());
        ex.span_start = static_cast<int>(p) + 1;
        ex.span_end = ex.span_start + static_cast<int>(motif.size()) - 1;
        return ex;
    }
}

Example make_example(const SyntheticCorpus& c, TaskKind kind, int label, Rng& rng) {
    switch (kind) {
        case TaskKind::Classification: return make_detection(c, label, rng);
        case TaskKind::Pair: return make_pair(c, label, rng);
        case TaskKind::Span: return make_span(c, rng);
    }
    throw std::logic_error("unknown task kind");
}

}  // namespace

void CorpusSpec::validate() const {
    if (num_sequences < 1) throw std::invalid_argument("corpus num_sequences must be at least 1");
    if (vocab_size < vocab::kFirstContent + 2) {
        throw std::invalid_argument("corpus vocab_size must be at least " + std::to_string(vocab::kFirstContent + 2));
    }
    if (num_motifs < 2) throw std::invalid_argument("corpus num_motifs must be at least 2");
    if (motif_len < 2) throw std::invalid_argument("corpus motif_len must be at least 2");
    if (seq_len < motif_len + 3) throw std::invalid_argument("corpus seq_len must be at least motif_len + 3");
    if (!(motif_prob >= 0.0 && motif_prob <= 1.0)) throw std::invalid_argument("corpus motif_prob must be in [0,1]");
}

SyntheticCorpus generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    SyntheticCorpus c{spec, {}, {}};
    Rng motif_rng(derive_seed(spec.seed, 1));
    std::set<std::vector<int>> seen;
    while (static_cast<int>(c.motifs.size()) < spec.num_motifs) {
        std::vector<int> m(spec.motif_len);
        for (int& t : m) t = content_token(spec, motif_rng);
        if (seen.insert(m).second) c.motifs.push_back(std::move(m));
    }
    Rng rng(derive_seed(spec.seed, 2));
    const auto all = without(spec.num_motifs, {});
    c.sequences.reserve(spec.num_sequences);
    for (int i = 0; i < spec.num_sequences; ++i) {
        std::vector<int> seq{vocab::kCls};
        const auto body = grammar(spec, c.motifs, all, spec.seq_len - 1, rng);
        seq.insert(seq.end(), body.begin(), body.end());
        c.sequences.push_back(std::move(seq));
    }
    return c;
}

std::vector<std::vector<int>> subsample(const SyntheticCorpus& corpus, double rho, std::uint64_t seed) {
    if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must be in (0, 1]");
    const std::size_t n = corpus.sequences.size();
    const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(rho * static_cast<double>(n))));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    shuffle(idx, rng);
    idx.resize(std::min(keep, n));
    std::sort(idx.begin(), idx.end());
    std::vector<std::vector<int>> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(corpus.sequences[i]);
    return out;
}

std::string task_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::Classification: return "motif_detection";
        case TaskKind::Pair: return "copy_pair";
        case TaskKind::Span: return "motif_span";
    }
    return "unknown";
}

ProxyTaskSuite build_tasks(const SyntheticCorpus& corpus, const TaskSpec& spec) {
    if (corpus.motifs.size() < 2) throw std::invalid_argument("build_tasks: corpus needs at least two motifs");
    if (spec.train_size < 2 || spec.dev_size < 2) throw std::invalid_argument("build_tasks: splits need >= 2 examples");
    ProxyTaskSuite suite;
    suite.detection_motif = corpus.motifs[0];
    suite.span_motif = corpus.motifs[1];
    for (TaskKind kind : kAllTasks) {
        Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(kind) + 1));
        TaskData& data = suite.tasks[static_cast<int>(kind)];
        data.kind = kind;
        std::set<std::vector<int>> train_inputs;
        auto fill = [&](std::vector<Example>& out, int size, bool is_dev) {
            for (int i = 0; i < size; ++i) {
                const int label = i % 2;
                for (;;) {
                    Example ex = make_example(corpus, kind, label, rng);
                    if (is_dev && train_inputs.contains(ex.tokens)) continue;
                    if (!is_dev) train_inputs.insert(ex.tokens);
                    out.push_back(std::move(ex));
                    break;
                }
            }
            shuffle(out, rng);
        };
        fill(data.train, spec.train_size, false);
        fill(data.dev, spec.dev_size, true);
    }
    return suite;
}

bool contains_motif(std::span<const int> tokens, std::span<const int> motif) {
    return count_occurrences(tokens, motif) > 0;
}

int oracle_pair_label(std::span<const int> tokens) {
    const auto sep = std::find(tokens.begin() + 1, tokens.end(), vocab::kSep);
    if (sep == tokens.end()) throw std::invalid_argument("pair example has no separator");
    const auto half = sep - (tokens.begin() + 1);
    if (tokens.end() - (sep + 1) < half) throw std::invalid_argument("pair example second half too short");
    return std::equal(tokens.begin() + 1, sep, sep + 1) ? 1 : 0;
}

std::pair<int, int> oracle_span(std::span<const int> tokens, std::span<const int> motif) {
    if (count_occurrences(tokens, motif) != 1) throw std::invalid_argument("span motif must occur exactly once");
    const auto it = std::search(tokens.begin(), tokens.end(), motif.begin(), motif.end());
    const int start = static_cast<int>(it - tokens.begin());
    return {start, start + static_cast<int>(motif.size()) - 1};
}

double span_f1(int pred_start, int pred_end, int gold_start, int gold_end) {
    if (pred_end < pred_start || gold_end < gold_start) return 0.0;
    const int overlap = std::min(pred_end, gold_end) - std::max(pred_start, gold_start) + 1;
    if (overlap <= 0) return 0.0;
    const double precision = static_cast<double>(overlap) / (pred_end - pred_start + 1);
    const double recall = static_cast<double>(overlap) / (gold_end - gold_start + 1);
    return 2.0 * precision * recall / (precision + recall);
}

namespace {

using nn::Matrix;

struct HeadLoss {
    double loss = 0.0;
    Matrix d_logits;
};

// Mean cross-entropy of `logits` rows against `labels`.
HeadLoss cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
    HeadLoss out;
    out.d_logits = nn::softmax_rows(logits);
    const double n = static_cast<double>(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        out.loss -= std::log(std::max(out.d_logits(r, labels[i]), 1e-300));
        out.d_logits(r, labels[i]) -= 1.0;
    }
    out.loss /= n;
    out.d_logits /= n;
    return out;
}

Matrix cls_rows(const Matrix& hidden, int batch, int seq_len) {
    Matrix out(batch, hidden.cols());
    for (int b = 0; b < batch; ++b) out.row(b) = hidden.row(static_cast<Eigen::Index>(b) * seq_len);
    return out;
}

// Logits of one span head column reshaped to B x L.
Matrix span_logits(const Matrix& logits, int col, int batch, int seq_len) {
    Matrix out(batch, seq_len);
    for (int b = 0; b < batch; ++b) {
        for (int t = 0; t < seq_len; ++t) out(b, t) = logits(static_cast<Eigen::Index>(b) * seq_len + t, col);
    }
    return out;
}

// Loss and d(loss)/d(final hidden) for one task batch.
double task_loss(TaskKind kind, const Matrix& hidden, const nn::Linear& head, std::span<const Example* const> batch,
                 int seq_len, Matrix& d_hidden, nn::Linear& head_grad) {
    const int B = static_cast<int>(batch.size());
    d_hidden = Matrix::Zero(hidden.rows(), hidden.cols());
    if (kind != TaskKind::Span) {
        const Matrix h = cls_rows(hidden, B, seq_len);
        std::vector<int> labels;
        for (const auto* ex : batch) labels.push_back(ex->label);
        const auto ce = cross_entropy(head.forward(h), labels);
        head_grad.weight = h.transpose() * ce.d_logits;
        head_grad.bias = ce.d_logits.colwise().sum();
        const Matrix dh = ce.d_logits * head.weight.transpose();
        for (int b = 0; b < B; ++b) d_hidden.row(static_cast<Eigen::Index>(b) * seq_len) = dh.row(b);
        return ce.loss;
    }
    const Matrix logits = head.forward(hidden);
    std::vector<int> starts, ends;
    for (const auto* ex : batch) {
        starts.push_back(ex->span_start);
        ends.push_back(ex->span_end);
    }
    const auto ce_s = cross_entropy(span_logits(logits, 0, B, seq_len), starts);
    const auto ce_e = cross_entropy(span_logits(logits, 1, B, seq_len), ends);
    Matrix d_logits(logits.rows(), 2);
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < seq_len; ++t) {
            d_logits(static_cast<Eigen::Index>(b) * seq_len + t, 0) = 0.5 * ce_s.d_logits(b, t);
            d_logits(static_cast<Eigen::Index>(b) * seq_len + t, 1) = 0.5 * ce_e.d_logits(b, t);
        }
    }
    head_grad.weight = hidden.transpose() * d_logits;
    head_grad.bias = d_logits.colwise().sum();
    d_hidden = d_logits * head.weight.transpose();
    return 0.5 * (ce_s.loss + ce_e.loss);
}

double dev_metric(TaskKind kind, const nn::Encoder& model, const nn::Linear& head, const std::vector<Example>& dev) {
    constexpr std::size_t kChunk = 64;
    double total = 0.0;
    for (std::size_t start = 0; start < dev.size(); start += kChunk) {
        const std::size_t count = std::min(kChunk, dev.size() - start);
        std::vector<std::vector<int>> seqs;
        for (std::size_t i = 0; i < count; ++i) seqs.push_back(dev[start + i].tokens);
        const auto batch = nn::Batch::from_sequences(seqs);
        const auto cache = nn::forward(model, batch);
        const int L = batch.seq_len;
        if (kind != TaskKind::Span) {
            const Matrix logits = head.forward(cls_rows(cache.output(), static_cast<int>(count), L));
            for (std::size_t i = 0; i < count; ++i) {
                Eigen::Index arg;
                logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
                total += arg == dev[start + i].label;
            }
        } else {
            const Matrix logits = head.forward(cache.output());
            const Matrix s = span_logits(logits, 0, static_cast<int>(count), L);
            const Matrix e = span_logits(logits, 1, static_cast<int>(count), L);
            for (std::size_t i = 0; i < count; ++i) {
                const auto r = static_cast<Eigen::Index>(i);
                Eigen::Index ps, pe;
                s.row(r).maxCoeff(&ps);
                e.row(r).tail(L - ps).maxCoeff(&pe);
                pe += ps;
                total += span_f1(static_cast<int>(ps), static_cast<int>(pe), dev[start + i].span_start,
                                 dev[start + i].span_end);
            }
        }
    }
    return total / static_cast<double>(dev.size());
}

}  // namespace

TaskScores finetune_and_score(const nn::Encoder& student, const ProxyTaskSuite& suite, const FinetuneConfig& config,
                              std::uint64_t seed) {
    if (config.steps < 0 || config.batch_size < 1) throw std::invalid_argument("invalid fine-tune config");
    TaskScores scores;
    for (TaskKind kind : kAllTasks) {
        const auto t = static_cast<std::size_t>(kind);
        const TaskData& data = suite.task(kind);
        nn::Encoder model = student;
        nn::Linear head = nn::Linear::zeros(student.config.hidden, 2);
        Rng init(derive_seed(seed, 10 + t));
        for (Eigen::Index i = 0; i < head.weight.size(); ++i) head.weight.data()[i] = init.truncated_normal(0.02);
        Rng rng(derive_seed(seed, 20 + t));
        nn::Adam adam;
        const nn::LinearSchedule schedule(config.learning_rate, std::max(config.steps, 1), config.warmup_fraction);
        std::vector<const Example*> batch(config.batch_size);
        std::vector<std::vector<int>> seqs(config.batch_size);
        for (int step = 0; step < config.steps; ++step) {
            for (int i = 0; i < config.batch_size; ++i) {
                batch[i] = &data.train[rng.below(data.train.size())];
                seqs[i] = batch[i]->tokens;
            }
            const auto nb = nn::Batch::from_sequences(seqs);
            const auto cache = nn::forward(model, nb);
            auto act = nn::ActivationGrads::empty(model.params.layers.size());
            nn::Linear head_grad;
            const double loss = task_loss(kind, cache.output(), head, batch, nb.seq_len, act.hidden.back(), head_grad);
            if (!std::isfinite(loss)) {
                scores.failed = true;
                scores.note = task_name(kind) + " fine-tuning diverged at step " + std::to_string(step);
                scores.per_task = {};
                scores.fitness = 0.0;
                return scores;
            }
            const auto enc_grad = nn::backward(model, cache, act);
            auto params = nn::tensor_list(model.params);
            auto grads = nn::tensor_list(enc_grad);
            params.push_back(&head.weight);
            params.push_back(&head.bias);
            grads.push_back(&head_grad.weight);
            grads.push_back(&head_grad.bias);
            adam.step(params, grads, schedule.at(step));
        }
        scores.per_task[t] = dev_metric(kind, model, head, data.dev);
    }
    scores.fitness = std::accumulate(scores.per_task.begin(), scores.per_task.end(), 0.0) / 3.0;
    return scores;
}

ProxyEvaluator::ProxyEvaluator(std::shared_ptr<const nn::Encoder> teacher,
                               std::shared_ptr<const SyntheticCorpus> corpus,
                               std::shared_ptr<const ProxyTaskSuite> suite, EvaluatorConfig config)
    : teacher_(std::move(teacher)),
      corpus_(std::move(corpus)),
      suite_(std::move(suite)),
      config_(std::move(config)),
      targets_(*teacher_, subsample(*corpus_, config_.rho, derive_seed(config_.seed, 5))) {
    config_.distill.validate();
}

std::vector<std::string> ProxyEvaluator::task_names() const {
    std::vector<std::string> names;
    for (TaskKind k : kAllTasks) names.push_back(task_name(k));
    return names;
}

MappingReport ProxyEvaluator::evaluate_mapping(const LayerMapping& mapping) const {
    ++evaluations_;
    MappingReport report{mapping, {}, {}, std::nullopt};
    distill::DistillConfig dc = config_.distill;
    dc.seed = derive_seed(config_.seed, 100);
    try {
        auto result = distill::distill(targets_, config_.student, mapping, dc);
        report.loss_curve = std::move(result.loss_curve);
        report.scores = finetune_and_score(result.student, *suite_, config_.finetune, derive_seed(config_.seed, 200));
        report.student = std::move(result.student);
    } catch (const distill::DivergenceError& e) {
        report.scores = TaskScores{};
        report.scores.failed = true;
        report.scores.note = e.what();
    }
    if (report.scores.failed) {
        std::cerr << "[elm] mapping " << mapping.to_string() << " failed: " << report.scores.note
                  << "; fitness set to 0\n";
    }
    return report;
}

Evaluation ProxyEvaluator::evaluate(const Gene& gene, const SearchSpace& space) const {
    const auto report = evaluate_mapping(decode(gene, space));
    if (!loss_curve_dir_.empty() && !report.loss_curve.empty()) {
        std::filesystem::create_directories(loss_curve_dir_);
        std::ofstream out(loss_curve_dir_ / ("loss_" + gene.bits() + ".csv"));
        out << "step,loss\n";
        out.precision(9);
        for (std::size_t i = 0; i < report.loss_curve.size(); ++i) out << i << ',' << report.loss_curve[i] << '\n';
    }
    Evaluation eval;
    eval.fitness = report.scores.fitness;
    eval.task_scores.assign(report.scores.per_task.begin(), report.scores.per_task.end());
    eval.failed = report.scores.failed;
    eval.note = report.scores.note;
    return eval;
}

Evaluation ExternalEvaluator::evaluate(const Gene& gene, const SearchSpace& space) const {
    return evaluate_batch(std::span(&gene, 1), space, 1).front();
}

std::vector<Evaluation> ExternalEvaluator::evaluate_batch(std::span<const Gene> genes, const SearchSpace& space,
                                                          int) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir_);
    const fs::path result_path = dir_ / "fitness.tsv";
    fs::remove(result_path);
    {
        const fs::path tmp = dir_ / "pending.tsv.tmp";
        std::ofstream out(tmp);
        for (const auto& g : genes) {
            out << g.bits() << '\t' << decode(g, space).to_string() << '\t' << seed_ << '\n';
        }
        out.close();
        fs::rename(tmp, dir_ / "pending.tsv");
    }
    std::set<std::string> wanted;
    for (const auto& g : genes) wanted.insert(g.bits());

    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_seconds_);
    std::map<std::string, Evaluation> found;
    for (;;) {
        found.clear();
        std::ifstream in(result_path);
        std::string line;
        while (in && std::getline(in, line)) {
            if (line.empty()) continue;
            std::istringstream fields(line);
            std::string bits, value;
            if (!std::getline(fields, bits, '\t') || !std::getline(fields, value, '\t')) continue;
            Evaluation e;
            try {
                e.fitness = std::stod(value);
                while (std::getline(fields, value, '\t')) e.task_scores.push_back(std::stod(value));
            } catch (const std::exception&) {
                continue;  // partially written line
            }
            found[bits] = std::move(e);
        }
        if (std::all_of(wanted.begin(), wanted.end(), [&](const std::string& b) { return found.contains(b); })) break;
        if (std::chrono::steady_clock::now() > deadline) {
            throw std::runtime_error("timed out waiting for " + result_path.string());
        }
        std::this_thread::sleep_for(std::chrono::duration<double>(poll_seconds_));
    }
    fs::remove(dir_ / "pending.tsv");
    std::vector<Evaluation> out;
    for (const auto& g : genes) out.push_back(found.at(g.bits()));
    return out;
}

}  // namespace elm::proxy
