#include "elm/mapping_space.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <sstream>

namespace elm {

SearchSpace::SearchSpace(ArchPair arch) : arch_(arch) {
    const int n = arch.teacher_layers;
    const int m = arch.student_layers;
    if (m < 1) throw std::invalid_argument("student_layers must be at least 1");
    if (n < m) {
        throw std::invalid_argument("student_layers (" + std::to_string(m) +
                                    ") exceeds teacher_layers (" + std::to_string(n) + ")");
    }
    // Smallest k with 2^k > 2N/M, i.e. 2^k * M > 2N in integers.
    int k = 1;
    while ((std::int64_t{1} << k) * m <= std::int64_t{2} * n) {
        ++k;
        if (k >= 16) throw std::invalid_argument("2N/M exceeds the supported gene width");
    }
    bits_ = k;
    const int span = 1 << k;

    ranges_.reserve(m);
    offsets_.reserve(m);
    for (int pos = 1; pos <= m; ++pos) {
        if (pos < m) {
            const int z = static_cast<int>((std::int64_t{pos - 1} * n) / (std::int64_t{2} * m));
            offsets_.push_back(z);
            ranges_.push_back({z + 1, std::min(z + span - 1, n)});
        } else {
            offsets_.push_back(n - span + 1);
            ranges_.push_back({std::max(n - span + 1, 1), n});
        }
    }
}

SearchSpace build_space(ArchPair arch) { return SearchSpace(arch); }

int LayerMapping::distilled_count() const {
    return static_cast<int>(std::count_if(entries_.begin(), entries_.end(),
                                          [](const auto& e) { return e.has_value(); }));
}

std::string LayerMapping::to_string() const {
    std::string out;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(entries_[i].value_or(0));
    }
    return out;
}

LayerMapping parse_mapping(std::string_view text) {
    std::vector<std::optional<int>> entries;
    std::size_t start = 0;
    int position = 1;
    while (true) {
        const std::size_t comma = text.find(',', start);
        std::string_view field = text.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                                  : comma - start);
        while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
        while (!field.empty() && field.back() == ' ') field.remove_suffix(1);
        int value = 0;
        auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
        if (field.empty() || ec != std::errc{} || ptr != field.data() + field.size() || value < 0) {
            throw std::invalid_argument("position " + std::to_string(position) + ": '" +
                                        std::string(field) + "' is not a non-negative integer");
        }
        entries.push_back(value == 0 ? std::nullopt : std::optional<int>(value));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
        ++position;
    }
    return LayerMapping(std::move(entries));
}

Gene::Gene(std::string bits) : bits_(std::move(bits)) {
    for (char c : bits_) {
        if (c != '0' && c != '1') throw std::invalid_argument("gene bits must be '0' or '1'");
    }
}

unsigned Gene::code(int position, int k) const {
    unsigned c = 0;
    const std::size_t base = static_cast<std::size_t>(position) * k;
    for (int b = 0; b < k; ++b) c = (c << 1) | (bits_[base + b] == '1' ? 1u : 0u);
    return c;
}

void Gene::set_code(int position, int k, unsigned code) {
    const std::size_t base = static_cast<std::size_t>(position) * k;
    for (int b = 0; b < k; ++b) bits_[base + b] = ((code >> (k - 1 - b)) & 1u) ? '1' : '0';
}

std::string Gene::to_string(int k) const {
    std::string out;
    for (std::size_t i = 0; i < bits_.size(); ++i) {
        if (i && i % k == 0) out += '-';
        out += bits_[i];
    }
    return out;
}

Gene parse_gene(std::string_view text) {
    std::string bits;
    bits.reserve(text.size());
    std::size_t group = 0;
    std::optional<std::size_t> width;
    for (char c : text) {
        if (c == '-') {
            if (group == 0 || (width && *width != group)) {
                throw std::invalid_argument("gene '" + std::string(text) + "' has uneven bit groups");
            }
            width = group;
            group = 0;
            continue;
        }
        if (c != '0' && c != '1') {
            throw std::invalid_argument("gene '" + std::string(text) + "' contains '" + std::string(1, c) + "'");
        }
        bits += c;
        ++group;
    }
    if (width && group != *width) {
        throw std::invalid_argument("gene '" + std::string(text) + "' has uneven bit groups");
    }
    return Gene(std::move(bits));
}

namespace {

void check_length(const Gene& gene, const SearchSpace& space) {
    if (gene.size() != static_cast<std::size_t>(space.gene_length())) {
        throw std::invalid_argument("gene has " + std::to_string(gene.size()) + " bits, expected " +
                                    std::to_string(space.gene_length()));
    }
}

std::optional<int> decode_code(unsigned code, int position, const SearchSpace& space) {
    const bool last = position + 1 == space.student_layers();
    if (!last && code == 0) return std::nullopt;
    return space.code_offset(position) + static_cast<int>(code);
}

}  // namespace

LayerMapping decode(const Gene& gene, const SearchSpace& space) {
    check_length(gene, space);
    const int k = space.bits_per_position();
    std::vector<std::optional<int>> entries;
    entries.reserve(space.student_layers());
    for (int pos = 0; pos < space.student_layers(); ++pos) {
        entries.push_back(decode_code(gene.code(pos, k), pos, space));
    }
    return LayerMapping(std::move(entries));
}

std::optional<std::string> validate_mapping(const LayerMapping& mapping, const SearchSpace& space) {
    const int m = space.student_layers();
    if (mapping.size() != static_cast<std::size_t>(m)) {
        return "mapping has " + std::to_string(mapping.size()) + " entries, expected " + std::to_string(m);
    }
    std::optional<int> previous;
    for (int pos = 0; pos < m; ++pos) {
        const std::string where = "position " + std::to_string(pos + 1) + ": ";
        const auto& entry = mapping[pos];
        if (!entry) {
            if (!space.none_allowed(pos)) return where + "last entry must map to a teacher layer";
            continue;
        }
        const Interval& r = space.range(pos);
        if (!r.contains(*entry)) {
            return where + std::to_string(*entry) + " outside [" + std::to_string(r.lo) + "," +
                   std::to_string(r.hi) + "]";
        }
        if (previous && *entry < *previous) {
            return where + std::to_string(*entry) + " < previous non-None " + std::to_string(*previous);
        }
        if (previous && *entry == *previous) {
            return where + std::to_string(*entry) + " repeats previous non-None " + std::to_string(*previous);
        }
        previous = entry;
    }
    return std::nullopt;
}

bool is_valid(const LayerMapping& mapping, const SearchSpace& space) {
    return !validate_mapping(mapping, space).has_value();
}

bool is_valid(const Gene& gene, const SearchSpace& space) { return is_valid(decode(gene, space), space); }

Gene encode(const LayerMapping& mapping, const SearchSpace& space) {
    if (auto err = validate_mapping(mapping, space)) throw InvalidMapping(*err);
    const int k = space.bits_per_position();
    Gene gene(std::string(static_cast<std::size_t>(space.gene_length()), '0'));
    for (int pos = 0; pos < space.student_layers(); ++pos) {
        const auto& entry = mapping[pos];
        const unsigned code = entry ? static_cast<unsigned>(*entry - space.code_offset(pos)) : 0u;
        gene.set_code(pos, k, code);
    }
    return gene;
}

namespace {

struct Enumerator {
    const SearchSpace& space;
    const MappingVisitor& visit;
    std::uint64_t cap;
    std::uint64_t count = 0;
    std::vector<std::optional<int>> entries;
    Gene gene;

    void recurse(int pos, int last) {
        const int m = space.student_layers();
        if (pos == m) {
            if (++count > cap) {
                throw EnumerationCapExceeded("search space exceeds enumeration cap of " + std::to_string(cap));
            }
            if (visit) visit(LayerMapping(entries), gene);
            return;
        }
        const int k = space.bits_per_position();
        const Interval& r = space.range(pos);
        for (unsigned code = 0; code < static_cast<unsigned>(space.codes_per_position()); ++code) {
            const auto value = decode_code(code, pos, space);
            if (value && (!r.contains(*value) || *value <= last)) continue;
            entries[pos] = value;
            gene.set_code(pos, k, code);
            recurse(pos + 1, value.value_or(last));
        }
    }
};

}  // namespace

std::uint64_t enumerate_space(const SearchSpace& space, const MappingVisitor& visit, std::uint64_t cap) {
    Enumerator e{space, visit, cap, 0, std::vector<std::optional<int>>(space.student_layers()),
                 Gene(std::string(static_cast<std::size_t>(space.gene_length()), '0'))};
    e.recurse(0, 0);
    return e.count;
}

std::vector<LayerMapping> enumerate_space(const SearchSpace& space, std::uint64_t cap) {
    std::vector<LayerMapping> out;
    enumerate_space(space, [&](const LayerMapping& m, const Gene&) { out.push_back(m); }, cap);
    return out;
}

Heuristic parse_heuristic(std::string_view name) {
    if (name == "uniform") return Heuristic::Uniform;
    if (name == "last-layer" || name == "last_layer") return Heuristic::LastLayer;
    if (name == "contribution") return Heuristic::Contribution;
    throw std::invalid_argument("unknown heuristic '" + std::string(name) +
                                "' (expected uniform, last-layer or contribution)");
}

std::string_view heuristic_name(Heuristic h) {
    switch (h) {
        case Heuristic::Uniform: return "uniform";
        case Heuristic::LastLayer: return "last-layer";
        case Heuristic::Contribution: return "contribution";
    }
    return "unknown";
}

LayerMapping heuristic_mapping(Heuristic strategy, ArchPair arch, std::span<const double> layer_scores) {
    const int n = arch.teacher_layers;
    const int m = arch.student_layers;
    if (m < 1 || n < m) throw std::invalid_argument("heuristic_mapping: need 1 <= M <= N");
    std::vector<std::optional<int>> entries(m);
    switch (strategy) {
        case Heuristic::Uniform:
            // round(pos * N / M), half up.
            for (int pos = 1; pos <= m; ++pos) entries[pos - 1] = (2 * pos * n + m) / (2 * m);
            break;
        case Heuristic::LastLayer:
            entries[m - 1] = n;
            break;
        case Heuristic::Contribution: {
            if (layer_scores.size() != static_cast<std::size_t>(n)) {
                throw std::invalid_argument("contribution heuristic needs one score per teacher layer (" +
                                            std::to_string(n) + "), got " +
                                            std::to_string(layer_scores.size()));
            }
            std::vector<int> layers(n);
            std::iota(layers.begin(), layers.end(), 1);
            std::stable_sort(layers.begin(), layers.end(), [&](int a, int b) {
                return layer_scores[a - 1] < layer_scores[b - 1];
            });
            layers.resize(m);
            std::sort(layers.begin(), layers.end());
            for (int pos = 0; pos < m; ++pos) entries[pos] = layers[pos];
            break;
        }
    }
    return LayerMapping(std::move(entries));
}

}  // namespace elm
