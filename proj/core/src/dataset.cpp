#include "fracimp/dataset.hpp"

#include "fracimp/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace fracimp {

// ---------------------------------------------------------------------------
// MissingPattern

MissingPattern::MissingPattern(std::vector<bool> observed)
    : observed_(std::move(observed))
{
}

MissingPattern MissingPattern::of(const UnitRecord& unit)
{
    std::vector<bool> mask(unit.values.size());
    for (std::size_t j = 0; j < unit.values.size(); ++j) {
        mask[j] = unit.values[j].has_value();
    }
    return MissingPattern(std::move(mask));
}

bool MissingPattern::complete() const noexcept
{
    return std::all_of(observed_.begin(), observed_.end(), [](bool b) { return b; });
}

std::size_t MissingPattern::missing_count() const noexcept
{
    return static_cast<std::size_t>(std::count(observed_.begin(), observed_.end(), false));
}

std::string MissingPattern::to_string() const
{
    std::string s;
    s.reserve(observed_.size());
    for (bool b : observed_) {
        s.push_back(b ? '1' : '0');
    }
    return s;
}

// ---------------------------------------------------------------------------
// SurveyDataset

SurveyDataset::SurveyDataset(std::vector<Item> items, std::vector<UnitRecord> units, std::vector<std::string> strata)
    : items_(std::move(items))
    , units_(std::move(units))
    , strata_(std::move(strata))
{
    validate();
    stratum_codes_.assign(units_.size(), 0);
    if (!strata_.empty()) {
        std::unordered_map<std::string, std::size_t> code_of;
        for (std::size_t i = 0; i < strata_.size(); ++i) {
            auto [it, inserted] = code_of.try_emplace(strata_[i], stratum_labels_.size());
            if (inserted) {
                stratum_labels_.push_back(strata_[i]);
            }
            stratum_codes_[i] = it->second;
        }
    } else if (!units_.empty()) {
        stratum_labels_.push_back("");
    }
}

void SurveyDataset::validate() const
{
    if (!strata_.empty() && strata_.size() != units_.size()) {
        fail(ErrorCode::validation, "stratum labels must be given for every unit");
    }
    for (std::size_t i = 0; i < units_.size(); ++i) {
        const auto& u = units_[i];
        if (!(u.weight > 0.0) || !std::isfinite(u.weight)) {
            fail(ErrorCode::validation, "unit '" + u.id + "' has nonpositive design weight");
        }
        if (u.values.size() != items_.size()) {
            fail(ErrorCode::validation, "unit '" + u.id + "' has " + std::to_string(u.values.size())
                    + " values for " + std::to_string(items_.size()) + " items");
        }
        for (std::size_t j = 0; j < items_.size(); ++j) {
            if (!u.values[j]) {
                continue;
            }
            const double v = *u.values[j];
            if (!std::isfinite(v)) {
                fail(ErrorCode::validation, "unit '" + u.id + "' has a non-finite value for item '" + items_[j].name + "'");
            }
            if (items_[j].kind == ItemKind::categorical) {
                if (v != std::floor(v) || v < 0.0) {
                    fail(ErrorCode::validation, "categorical item '" + items_[j].name + "' needs nonnegative integer codes");
                }
                if (!items_[j].labels.empty() && v >= static_cast<double>(items_[j].labels.size())) {
                    fail(ErrorCode::validation, "code outside label table for item '" + items_[j].name + "'");
                }
            }
        }
    }
}

std::size_t SurveyDataset::item_index(const std::string& name) const
{
    for (std::size_t j = 0; j < items_.size(); ++j) {
        if (items_[j].name == name) {
            return j;
        }
    }
    fail(ErrorCode::contract, "unknown item '" + name + "'");
}

std::vector<double> SurveyDataset::weights() const
{
    std::vector<double> w(units_.size());
    std::transform(units_.begin(), units_.end(), w.begin(), [](const UnitRecord& u) { return u.weight; });
    return w;
}

double SurveyDataset::total_weight() const
{
    double total = 0.0;
    for (const auto& u : units_) {
        total += u.weight;
    }
    return total;
}

bool SurveyDataset::complete() const noexcept
{
    return std::all_of(units_.begin(), units_.end(), [](const UnitRecord& u) {
        return std::all_of(u.values.begin(), u.values.end(), [](const auto& v) { return v.has_value(); });
    });
}

std::vector<double> SurveyDataset::filled_values(std::size_t i) const
{
    const auto& u = units_.at(i);
    std::vector<double> y(u.values.size(), 0.0);
    for (std::size_t j = 0; j < y.size(); ++j) {
        if (u.values[j]) {
            y[j] = *u.values[j];
        }
    }
    return y;
}

SurveyDataset SurveyDataset::with_weights(std::span<const double> weights) const
{
    require(weights.size() == units_.size(), "with_weights: one weight per unit required");
    auto units = units_;
    for (std::size_t i = 0; i < units.size(); ++i) {
        units[i].weight = weights[i];
    }
    return SurveyDataset(items_, std::move(units), strata_);
}

SurveyDataset SurveyDataset::with_units(std::vector<UnitRecord> units) const
{
    require(units.size() == units_.size(), "with_units: unit count must not change");
    return SurveyDataset(items_, std::move(units), strata_);
}

std::map<MissingPattern, std::vector<std::size_t>> pattern_partition(const SurveyDataset& data)
{
    std::map<MissingPattern, std::vector<std::size_t>> buckets;
    for (std::size_t i = 0; i < data.size(); ++i) {
        buckets[MissingPattern::of(data.unit(i))].push_back(i);
    }
    return buckets;
}

// ---------------------------------------------------------------------------
// Text helpers

std::string format_double(double value)
{
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
    if (ec != std::errc {}) {
        fail(ErrorCode::io, "cannot format number");
    }
    return std::string(buf, end);
}

double parse_double(std::string_view text)
{
    while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) {
        text.remove_prefix(1);
    }
    while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) {
        text.remove_suffix(1);
    }
    if (!text.empty() && text.front() == '+') {
        text.remove_prefix(1);
    }
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc {} || ptr != text.data() + text.size() || text.empty()) {
        fail(ErrorCode::parse, "not a number: '" + std::string(text) + "'");
    }
    return value;
}

std::vector<std::string> split_csv_line(std::string_view line)
{
    if (!line.empty() && line.back() == '\r') {
        line.remove_suffix(1);
    }
    std::vector<std::string> fields;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(field));
            field.clear();
        } else {
            field.push_back(c);
        }
    }
    if (quoted) {
        fail(ErrorCode::parse, "unterminated quoted field");
    }
    fields.push_back(std::move(field));
    return fields;
}

std::string quote_csv_field(std::string_view field)
{
    if (field.find_first_of(",\"\n\r") == std::string_view::npos) {
        return std::string(field);
    }
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') {
            out.push_back('"');
        }
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorCode::io, "cannot open '" + path.string() + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content)
{
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            fail(ErrorCode::io, "cannot write '" + path.string() + "'");
        }
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) {
            fail(ErrorCode::io, "write failed for '" + path.string() + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        fail(ErrorCode::io, "cannot move output into '" + path.string() + "'");
    }
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::size_t find_column(const std::vector<std::string>& header, const std::string& name, const std::filesystem::path& path)
{
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
        fail(ErrorCode::parse, "column '" + name + "' not found in '" + path.string() + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
}

} // namespace

SurveyDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema)
{
    const std::string text = read_file(path);
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) {
        fail(ErrorCode::parse, "'" + path.string() + "' has no header row");
    }
    const auto header = split_csv_line(line);

    const auto weight_col = find_column(header, schema.weight_column, path);
    std::optional<std::size_t> id_col;
    std::optional<std::size_t> stratum_col;
    if (schema.id_column) {
        id_col = find_column(header, *schema.id_column, path);
    }
    if (schema.stratum_column) {
        stratum_col = find_column(header, *schema.stratum_column, path);
    }
    std::vector<std::size_t> item_cols;
    for (const auto& item : schema.items) {
        item_cols.push_back(find_column(header, item.name, path));
    }

    auto items = schema.items;
    std::vector<std::unordered_map<std::string, std::size_t>> label_codes(items.size());
    for (std::size_t j = 0; j < items.size(); ++j) {
        for (std::size_t c = 0; c < items[j].labels.size(); ++c) {
            label_codes[j].emplace(items[j].labels[c], c);
        }
    }

    std::vector<UnitRecord> units;
    std::vector<std::string> strata;
    std::size_t row_number = 1;
    while (std::getline(in, line)) {
        ++row_number;
        if (line.empty() || line == "\r") {
            continue;
        }
        std::vector<std::string> fields;
        try {
            fields = split_csv_line(line);
        } catch (const Error& e) {
            fail(ErrorCode::parse, path.string() + ": row " + std::to_string(row_number) + ": " + e.what());
        }
        if (fields.size() != header.size()) {
            fail(ErrorCode::parse, path.string() + ": row " + std::to_string(row_number) + " has "
                    + std::to_string(fields.size()) + " fields, header has " + std::to_string(header.size()));
        }
        UnitRecord unit;
        unit.id = id_col ? fields[*id_col] : std::to_string(units.size() + 1);
        try {
            unit.weight = parse_double(fields[weight_col]);
        } catch (const Error& e) {
            fail(ErrorCode::parse, path.string() + ": row " + std::to_string(row_number) + ": weight: " + e.what());
        }
        if (!(unit.weight > 0.0)) {
            fail(ErrorCode::validation, path.string() + ": row " + std::to_string(row_number) + " has nonpositive weight");
        }
        unit.values.resize(items.size());
        for (std::size_t j = 0; j < items.size(); ++j) {
            const auto& cell = fields[item_cols[j]];
            if (cell == schema.missing_token) {
                continue;
            }
            if (items[j].kind == ItemKind::categorical) {
                auto [it, inserted] = label_codes[j].try_emplace(cell, items[j].labels.size());
                if (inserted) {
                    items[j].labels.push_back(cell);
                }
                unit.values[j] = static_cast<double>(it->second);
            } else {
                try {
                    unit.values[j] = parse_double(cell);
                } catch (const Error& e) {
                    fail(ErrorCode::parse, path.string() + ": row " + std::to_string(row_number) + ": column '"
                            + items[j].name + "': " + e.what());
                }
            }
        }
        if (stratum_col) {
            strata.push_back(fields[*stratum_col]);
        }
        units.push_back(std::move(unit));
    }
    return SurveyDataset(std::move(items), std::move(units), std::move(strata));
}

void save_csv(const SurveyDataset& data, const std::filesystem::path& path, const CsvSchema& schema)
{
    std::ostringstream out;
    std::vector<std::string> header;
    if (schema.id_column) {
        header.push_back(*schema.id_column);
    }
    header.push_back(schema.weight_column);
    if (schema.stratum_column) {
        header.push_back(*schema.stratum_column);
    }
    for (const auto& item : data.items()) {
        header.push_back(item.name);
    }
    for (std::size_t c = 0; c < header.size(); ++c) {
        out << (c ? "," : "") << quote_csv_field(header[c]);
    }
    out << '\n';
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& u = data.unit(i);
        bool first = true;
        auto emit = [&](const std::string& s) {
            out << (first ? "" : ",") << quote_csv_field(s);
            first = false;
        };
        if (schema.id_column) {
            emit(u.id);
        }
        emit(format_double(u.weight));
        if (schema.stratum_column) {
            emit(data.has_strata() ? data.strata()[i] : std::string());
        }
        for (std::size_t j = 0; j < data.item_count(); ++j) {
            if (!u.values[j]) {
                emit(schema.missing_token);
            } else if (data.items()[j].kind == ItemKind::categorical && !data.items()[j].labels.empty()) {
                emit(data.items()[j].labels.at(static_cast<std::size_t>(*u.values[j])));
            } else {
                emit(format_double(*u.values[j]));
            }
        }
        out << '\n';
    }
    write_file_atomic(path, out.str());
}

// ---------------------------------------------------------------------------
// FractionalDataset

FractionalDataset::FractionalDataset(std::shared_ptr<const SurveyDataset> base, std::vector<std::size_t> units,
    std::vector<int> donors, std::vector<double> values, std::vector<double> weights, WeightSign sign,
    std::vector<std::size_t> unimputed)
    : base_(std::move(base))
    , units_(std::move(units))
    , donors_(std::move(donors))
    , values_(std::move(values))
    , weights_(std::move(weights))
    , unimputed_(std::move(unimputed))
{
    require(base_ != nullptr, "FractionalDataset needs a base data set");
    stride_ = base_->item_count();
    require(donors_.size() == units_.size() && weights_.size() == units_.size()
            && values_.size() == units_.size() * stride_,
        "FractionalDataset: inconsistent row arrays");
    std::sort(unimputed_.begin(), unimputed_.end());

    offsets_.assign(base_->size() + 1, 0);
    for (std::size_t r = 0; r < units_.size(); ++r) {
        require(units_[r] < base_->size(), "FractionalDataset: row refers to unknown unit");
        require(r == 0 || units_[r] >= units_[r - 1], "FractionalDataset: rows must be grouped by ascending unit");
        ++offsets_[units_[r] + 1];
    }
    std::partial_sum(offsets_.begin(), offsets_.end(), offsets_.begin());
    validate(sign);
}

void FractionalDataset::validate(WeightSign sign) const
{
    const auto& base = *base_;
    for (std::size_t i = 0; i < base.size(); ++i) {
        const auto [b, e] = unit_rows(i);
        const auto& unit = base.unit(i);
        if (b == e) {
            if (!std::binary_search(unimputed_.begin(), unimputed_.end(), i)) {
                fail(ErrorCode::validation, "unit '" + unit.id + "' has no rows in the fractional data set");
            }
            continue;
        }
        double sum = 0.0;
        for (std::size_t r = b; r < e; ++r) {
            const double w = weights_[r];
            if (!std::isfinite(w)) {
                fail(ErrorCode::validation, "non-finite fractional weight for unit '" + unit.id + "'");
            }
            if (sign == WeightSign::nonnegative && w < 0.0) {
                fail(ErrorCode::validation, "negative fractional weight for unit '" + unit.id + "'");
            }
            sum += w;
            const auto y = row_values(r);
            for (std::size_t j = 0; j < stride_; ++j) {
                if (unit.values[j] && y[j] != *unit.values[j]) {
                    fail(ErrorCode::validation, "row for unit '" + unit.id + "' changes observed item '"
                            + base.items()[j].name + "'");
                }
            }
        }
        const double tol = kNormalizationTolerance * std::max<double>(1.0, static_cast<double>(e - b) / 64.0);
        if (std::abs(sum - 1.0) > tol) {
            fail(ErrorCode::validation, "fractional weights of unit '" + unit.id + "' sum to " + format_double(sum));
        }
    }
}

FractionalRow FractionalDataset::row(std::size_t r) const
{
    return FractionalRow { units_.at(r), donors_.at(r), row_values(r), weights_.at(r) };
}

FractionalDataset FractionalDataset::with_weights(std::vector<double> weights, WeightSign sign) const
{
    return FractionalDataset(base_, units_, donors_, values_, std::move(weights), sign, unimputed_);
}

double FractionalDataset::max_normalization_error() const
{
    double worst = 0.0;
    for (std::size_t i = 0; i + 1 < offsets_.size(); ++i) {
        const auto [b, e] = unit_rows(i);
        if (b == e) {
            continue;
        }
        double sum = 0.0;
        for (std::size_t r = b; r < e; ++r) {
            sum += weights_[r];
        }
        worst = std::max(worst, std::abs(sum - 1.0));
    }
    return worst;
}

bool FractionalDataset::has_negative_weights() const
{
    return std::any_of(weights_.begin(), weights_.end(), [](double w) { return w < 0.0; });
}

FractionalBuilder::FractionalBuilder(std::shared_ptr<const SurveyDataset> base)
    : base_(std::move(base))
{
    require(base_ != nullptr, "FractionalBuilder needs a base data set");
}

void FractionalBuilder::reserve(std::size_t rows)
{
    units_.reserve(rows);
    donors_.reserve(rows);
    weights_.reserve(rows);
    values_.reserve(rows * base_->item_count());
}

void FractionalBuilder::add(std::size_t unit, int donor, std::span<const double> values, double weight)
{
    require(values.size() == base_->item_count(), "FractionalBuilder: row width must equal item count");
    units_.push_back(unit);
    donors_.push_back(donor);
    values_.insert(values_.end(), values.begin(), values.end());
    weights_.push_back(weight);
}

FractionalDataset FractionalBuilder::build(WeightSign sign) &&
{
    return FractionalDataset(std::move(base_), std::move(units_), std::move(donors_), std::move(values_),
        std::move(weights_), sign, std::move(unimputed_));
}

FractionalDataset augment_complete(std::shared_ptr<const SurveyDataset> data)
{
    require(data != nullptr, "augment_complete: null data set");
    FractionalBuilder builder(data);
    builder.reserve(data->size());
    for (std::size_t i = 0; i < data->size(); ++i) {
        const auto& u = data->unit(i);
        for (std::size_t j = 0; j < u.values.size(); ++j) {
            if (!u.values[j]) {
                fail(ErrorCode::contract, "augment_complete: unit '" + u.id + "' has missing item '"
                        + data->items()[j].name + "'");
            }
        }
        const auto y = data->filled_values(i);
        builder.add(i, 0, y, 1.0);
    }
    return std::move(builder).build();
}

std::string fractional_csv(const FractionalDataset& fdata)
{
    const auto& base = fdata.base();
    std::ostringstream out;
    out << "unit_id,donor_index";
    for (const auto& item : base.items()) {
        out << ',' << quote_csv_field(item.name);
    }
    out << ",fractional_weight\n";
    for (std::size_t r = 0; r < fdata.size(); ++r) {
        const auto row = fdata.row(r);
        out << quote_csv_field(base.unit(row.unit).id) << ',' << row.donor;
        for (std::size_t j = 0; j < row.values.size(); ++j) {
            const auto& item = base.items()[j];
            out << ',';
            if (item.kind == ItemKind::categorical && !item.labels.empty()) {
                out << quote_csv_field(item.labels.at(static_cast<std::size_t>(row.values[j])));
            } else {
                out << format_double(row.values[j]);
            }
        }
        out << ',' << format_double(row.weight) << '\n';
    }
    return out.str();
}

void save_fractional_csv(const FractionalDataset& fdata, const std::filesystem::path& path)
{
    write_file_atomic(path, fractional_csv(fdata));
}

} // namespace fracimp
