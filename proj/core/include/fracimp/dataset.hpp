#pragma once

#include <compare>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fracimp {

enum class ItemKind { continuous, categorical };

// A survey item. Categorical items store integer codes; `labels[code]` is the
// text written to and read from CSV files.
struct Item {
    std::string name;
    ItemKind kind = ItemKind::continuous;
    std::vector<std::string> labels;

    friend bool operator==(const Item&, const Item&) = default;
};

struct UnitRecord {
    std::string id;
    double weight = 1.0;
    std::vector<std::optional<double>> values;

    [[nodiscard]] bool responded(std::size_t item) const { return values.at(item).has_value(); }

    friend bool operator==(const UnitRecord&, const UnitRecord&) = default;
};

// Observed/missing mask over the items of a unit; `true` marks an observed item.
class MissingPattern {
public:
    MissingPattern() = default;
    explicit MissingPattern(std::vector<bool> observed);

    static MissingPattern of(const UnitRecord& unit);

    [[nodiscard]] std::size_t size() const noexcept { return observed_.size(); }
    [[nodiscard]] bool observed(std::size_t item) const { return observed_.at(item); }
    [[nodiscard]] bool complete() const noexcept;
    [[nodiscard]] std::size_t missing_count() const noexcept;
    [[nodiscard]] const std::vector<bool>& mask() const noexcept { return observed_; }

    // "11", "10", ... in item order, 1 = observed.
    [[nodiscard]] std::string to_string() const;

    friend auto operator<=>(const MissingPattern&, const MissingPattern&) = default;
    friend bool operator==(const MissingPattern&, const MissingPattern&) = default;

private:
    std::vector<bool> observed_;
};

// Weighted survey sample with item nonresponse. Immutable once constructed;
// the constructor enforces positive weights, one value slot per item and
// valid categorical codes.
class SurveyDataset {
public:
    SurveyDataset() = default;
    SurveyDataset(std::vector<Item> items, std::vector<UnitRecord> units, std::vector<std::string> strata = {});

    [[nodiscard]] const std::vector<Item>& items() const noexcept { return items_; }
    [[nodiscard]] const std::vector<UnitRecord>& units() const noexcept { return units_; }
    [[nodiscard]] const UnitRecord& unit(std::size_t i) const { return units_.at(i); }
    [[nodiscard]] std::size_t size() const noexcept { return units_.size(); }
    [[nodiscard]] bool empty() const noexcept { return units_.empty(); }
    [[nodiscard]] std::size_t item_count() const noexcept { return items_.size(); }

    // Throws a contract error for unknown names.
    [[nodiscard]] std::size_t item_index(const std::string& name) const;

    [[nodiscard]] bool has_strata() const noexcept { return !strata_.empty(); }
    [[nodiscard]] const std::vector<std::string>& strata() const noexcept { return strata_; }
    // Dense stratum codes in order of first appearance; all zero without strata.
    [[nodiscard]] const std::vector<std::size_t>& stratum_codes() const noexcept { return stratum_codes_; }
    [[nodiscard]] std::size_t stratum_count() const noexcept { return stratum_labels_.size(); }
    [[nodiscard]] const std::vector<std::string>& stratum_labels() const noexcept { return stratum_labels_; }

    [[nodiscard]] std::vector<double> weights() const;
    [[nodiscard]] double total_weight() const;
    [[nodiscard]] bool complete() const noexcept;

    // Observed values of unit i with missing slots set to 0. Pair with
    // MissingPattern::of(unit(i)) to know which entries are meaningful.
    [[nodiscard]] std::vector<double> filled_values(std::size_t i) const;

    [[nodiscard]] SurveyDataset with_weights(std::span<const double> weights) const;
    [[nodiscard]] SurveyDataset with_units(std::vector<UnitRecord> units) const;

    friend bool operator==(const SurveyDataset&, const SurveyDataset&) = default;

private:
    void validate() const;

    std::vector<Item> items_;
    std::vector<UnitRecord> units_;
    std::vector<std::string> strata_;
    std::vector<std::size_t> stratum_codes_;
    std::vector<std::string> stratum_labels_;
};

// Buckets unit indices by missing pattern.
std::map<MissingPattern, std::vector<std::size_t>> pattern_partition(const SurveyDataset& data);

struct CsvSchema {
    std::string weight_column = "weight";
    std::optional<std::string> id_column;
    std::optional<std::string> stratum_column;
    std::vector<Item> items;
    std::string missing_token = "NA";
};

SurveyDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema);
void save_csv(const SurveyDataset& data, const std::filesystem::path& path, const CsvSchema& schema);

// Shortest decimal text that parses back to the same double.
std::string format_double(double value);
double parse_double(std::string_view text);

// One row of a fractionally imputed data set.
struct FractionalRow {
    std::size_t unit = 0;
    int donor = 0;
    std::span<const double> values;
    double weight = 1.0;
};

enum class WeightSign { nonnegative, any };

// Augmented data set: every unit of `base` is represented by one or more
// completed rows whose fractional weights sum to one. Rows are grouped by
// unit in ascending unit order.
class FractionalDataset {
public:
    static constexpr double kNormalizationTolerance = 1e-12;

    FractionalDataset() = default;
    FractionalDataset(std::shared_ptr<const SurveyDataset> base, std::vector<std::size_t> units, std::vector<int> donors,
        std::vector<double> values, std::vector<double> weights, WeightSign sign = WeightSign::nonnegative,
        std::vector<std::size_t> unimputed = {});

    [[nodiscard]] const SurveyDataset& base() const { return *base_; }
    [[nodiscard]] const std::shared_ptr<const SurveyDataset>& base_ptr() const noexcept { return base_; }
    [[nodiscard]] std::size_t size() const noexcept { return units_.size(); }
    [[nodiscard]] std::size_t stride() const noexcept { return stride_; }

    [[nodiscard]] FractionalRow row(std::size_t r) const;
    [[nodiscard]] std::size_t row_unit(std::size_t r) const { return units_[r]; }
    [[nodiscard]] double row_weight(std::size_t r) const { return weights_[r]; }
    [[nodiscard]] std::span<const double> row_values(std::size_t r) const
    {
        return { values_.data() + r * stride_, stride_ };
    }
    [[nodiscard]] const std::vector<double>& weights() const noexcept { return weights_; }
    [[nodiscard]] const std::vector<int>& donors() const noexcept { return donors_; }
    [[nodiscard]] const std::vector<std::size_t>& units() const noexcept { return units_; }
    // All row values, row-major with width stride().
    [[nodiscard]] std::span<const double> values() const noexcept { return values_; }

    // Row range [begin, end) of unit i; empty for unimputed units.
    [[nodiscard]] std::pair<std::size_t, std::size_t> unit_rows(std::size_t i) const
    {
        return { offsets_.at(i), offsets_.at(i + 1) };
    }
    [[nodiscard]] const std::vector<std::size_t>& unimputed() const noexcept { return unimputed_; }

    // Same rows with different fractional weights (validated again).
    [[nodiscard]] FractionalDataset with_weights(std::vector<double> weights, WeightSign sign = WeightSign::nonnegative) const;

    [[nodiscard]] double max_normalization_error() const;
    [[nodiscard]] bool has_negative_weights() const;

private:
    void validate(WeightSign sign) const;

    std::shared_ptr<const SurveyDataset> base_;
    std::size_t stride_ = 0;
    std::vector<std::size_t> units_;
    std::vector<int> donors_;
    std::vector<double> values_;
    std::vector<double> weights_;
    std::vector<std::size_t> offsets_;
    std::vector<std::size_t> unimputed_;
};

// Appends rows in unit order and builds the validated data set.
class FractionalBuilder {
public:
    explicit FractionalBuilder(std::shared_ptr<const SurveyDataset> base);

    void add(std::size_t unit, int donor, std::span<const double> values, double weight);
    void mark_unimputed(std::size_t unit) { unimputed_.push_back(unit); }
    void reserve(std::size_t rows);

    [[nodiscard]] FractionalDataset build(WeightSign sign = WeightSign::nonnegative) &&;

private:
    std::shared_ptr<const SurveyDataset> base_;
    std::vector<std::size_t> units_;
    std::vector<int> donors_;
    std::vector<double> values_;
    std::vector<double> weights_;
    std::vector<std::size_t> unimputed_;
};

// Identity augmentation of a data set without missing items.
FractionalDataset augment_complete(std::shared_ptr<const SurveyDataset> data);

// CSV with columns unit_id, donor_index, <items>, fractional_weight.
std::string fractional_csv(const FractionalDataset& fdata);
void save_fractional_csv(const FractionalDataset& fdata, const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it into place, so readers
// never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

// Minimal RFC 4180 field splitting (quoted fields, doubled quotes).
std::vector<std::string> split_csv_line(std::string_view line);
std::string quote_csv_field(std::string_view field);

} // namespace fracimp
