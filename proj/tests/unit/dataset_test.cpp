#include "doctest.h"
#include "oracles.hpp"

#include "fracimp/dataset.hpp"
#include "fracimp/error.hpp"
#include "fracimp/estimating.hpp"
#include "fracimp/rng.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

using namespace fracimp;
using oracle::NA;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& content)
{
    const auto dir = std::filesystem::temp_directory_path() / "fracimp_dataset_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / name;
    std::ofstream(path, std::ios::binary) << content;
    return path;
}

CsvSchema xy_schema()
{
    CsvSchema s;
    s.id_column = "id";
    s.items = { { "x", ItemKind::continuous, {} }, { "y", ItemKind::continuous, {} } };
    return s;
}

} // namespace

TEST_CASE("load_csv marks the missing token as nonresponse")
{
    const auto path = temp_file("three.csv", "id,weight,x,y\na,1,1.5,2\nb,2,2.5,NA\nc,1,3.5,4\n");
    const auto data = load_csv(path, xy_schema());
    REQUIRE(data.size() == 3);
    CHECK(data.unit(0).responded(1));
    CHECK_FALSE(data.unit(1).responded(1));
    CHECK(data.unit(1).weight == 2.0);
    CHECK(data.unit(1).id == "b");
}

TEST_CASE("load_csv rejects a zero weight")
{
    const auto path = temp_file("zero.csv", "id,weight,x,y\na,0,1,2\n");
    try {
        (void)load_csv(path, xy_schema());
        FAIL("expected a validation error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::validation);
    }
}

TEST_CASE("load_csv on a missing file is an io error naming the path")
{
    try {
        (void)load_csv("/nonexistent/fracimp.csv", xy_schema());
        FAIL("expected an io error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::io);
        CHECK(std::string(e.what()).find("/nonexistent/fracimp.csv") != std::string::npos);
    }
}

TEST_CASE("save_csv then load_csv reproduces the data set bit-exactly")
{
    auto rng = substream(7, Stream::sample, 0);
    std::vector<std::vector<double>> rows;
    std::vector<double> w;
    std::vector<std::string> strata;
    for (int i = 0; i < 40; ++i) {
        const double x = standard_normal(rng) * 1e3;
        const double y = uniform01(rng) < 0.3 ? NA : std::exp(standard_normal(rng)) / 7.0;
        rows.push_back({ x, y });
        w.push_back(1.0 / (uniform01(rng) + 0.01));
        strata.push_back(i < 20 ? "s1" : "s,2");
    }
    const auto data = oracle::make_data({ "x", "y" }, rows, w, strata);
    auto schema = xy_schema();
    schema.id_column = "id";
    schema.stratum_column = "stratum";
    const auto path = std::filesystem::temp_directory_path() / "fracimp_dataset_test" / "roundtrip.csv";
    std::filesystem::create_directories(path.parent_path());
    save_csv(data, path, schema);
    const auto back = load_csv(path, schema);
    CHECK(back == data);
}

TEST_CASE("categorical items round-trip through their labels")
{
    const auto path = temp_file("cat.csv", "weight,g,y\n1,b,1\n1,a,NA\n2,c,3\n");
    CsvSchema s;
    s.items = { { "g", ItemKind::categorical, { "a", "b", "c" } }, { "y", ItemKind::continuous, {} } };
    const auto data = load_csv(path, s);
    CHECK(*data.unit(0).values[0] == 1.0);
    CHECK(*data.unit(1).values[0] == 0.0);
    const auto out = std::filesystem::temp_directory_path() / "fracimp_dataset_test" / "cat_out.csv";
    save_csv(data, out, s);
    CHECK(load_csv(out, s) == data);
}

TEST_CASE("pattern_partition")
{
    SUBCASE("four masks give four buckets")
    {
        const auto data = oracle::make_data({ "y1", "y2" }, { { 1, 2 }, { 1, NA }, { NA, 2 }, { NA, NA } });
        const auto parts = pattern_partition(data);
        REQUIRE(parts.size() == 4);
        std::set<std::string> keys;
        for (const auto& [p, units] : parts) {
            keys.insert(p.to_string());
            CHECK(units.size() == 1);
        }
        CHECK(keys == std::set<std::string> { "11", "10", "01", "00" });
    }
    SUBCASE("complete data give one bucket")
    {
        const auto data = oracle::make_data({ "y1", "y2", "y3" }, { { 1, 2, 3 }, { 4, 5, 6 } });
        const auto parts = pattern_partition(data);
        REQUIRE(parts.size() == 1);
        CHECK(parts.begin()->first.to_string() == "111");
    }
    SUBCASE("empty data give an empty map")
    {
        CHECK(pattern_partition(SurveyDataset {}).empty());
    }
    SUBCASE("partition property on random masks")
    {
        std::mt19937_64 rng(11);
        std::bernoulli_distribution miss(0.4);
        std::vector<std::vector<double>> rows;
        for (int i = 0; i < 200; ++i) {
            rows.push_back({ miss(rng) ? NA : 1.0, miss(rng) ? NA : 2.0, miss(rng) ? NA : 3.0 });
        }
        const auto data = oracle::make_data({ "a", "b", "c" }, rows);
        std::vector<int> seen(rows.size(), 0);
        for (const auto& [p, units] : pattern_partition(data)) {
            for (auto i : units) {
                ++seen[i];
                CHECK(MissingPattern::of(data.unit(i)) == p);
            }
        }
        for (int s : seen) {
            CHECK(s == 1);
        }
    }
}

TEST_CASE("augment_complete")
{
    SUBCASE("five complete units give five rows of weight one")
    {
        auto data = std::make_shared<const SurveyDataset>(
            oracle::make_data({ "y" }, { { 1 }, { 2 }, { 3 }, { 4 }, { 5 } }, { 1, 2, 3, 4, 5 }));
        const auto f = augment_complete(data);
        REQUIRE(f.size() == 5);
        for (std::size_t r = 0; r < f.size(); ++r) {
            CHECK(f.row_weight(r) == 1.0);
            CHECK(f.row_values(r)[0] == *data->unit(r).values[0]);
        }
        const auto U = EstimatingFunction::mean(0);
        CHECK(solve_fractional(f, U).value() == doctest::Approx(solve_complete(*data, U).value()).epsilon(1e-14));
    }
    SUBCASE("empty data give an empty fractional data set")
    {
        const auto f = augment_complete(std::make_shared<const SurveyDataset>());
        CHECK(f.size() == 0);
    }
}

TEST_CASE("FractionalDataset enforces normalization and observed values")
{
    auto data = std::make_shared<const SurveyDataset>(oracle::make_data({ "x", "y" }, { { 1, NA }, { 2, 5 } }));
    SUBCASE("weights must sum to one per unit")
    {
        FractionalBuilder b(data);
        const double r1[] = { 1, 3 };
        const double r2[] = { 1, 4 };
        const double r3[] = { 2, 5 };
        b.add(0, 1, r1, 0.5);
        b.add(0, 1, r2, 0.6);
        b.add(1, -1, r3, 1.0);
        CHECK_THROWS_AS((void)std::move(b).build(), Error);
    }
    SUBCASE("observed values are preserved")
    {
        FractionalBuilder b(data);
        const double r1[] = { 9, 3 };
        const double r3[] = { 2, 5 };
        b.add(0, 1, r1, 1.0);
        b.add(1, -1, r3, 1.0);
        CHECK_THROWS_AS((void)std::move(b).build(), Error);
    }
    SUBCASE("negative weights need an explicit sign policy")
    {
        FractionalBuilder b(data);
        const double r1[] = { 1, 3 };
        const double r2[] = { 1, 4 };
        const double r3[] = { 2, 5 };
        b.add(0, 1, r1, 1.5);
        b.add(0, 1, r2, -0.5);
        b.add(1, -1, r3, 1.0);
        FractionalBuilder b2 = b;
        CHECK_THROWS_AS((void)std::move(b).build(), Error);
        const auto f = std::move(b2).build(WeightSign::any);
        CHECK(f.has_negative_weights());
        CHECK(f.max_normalization_error() <= 1e-12);
    }
}

TEST_CASE("format_double round-trips")
{
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1e6, 1e6);
    for (int k = 0; k < 1000; ++k) {
        const double v = u(rng) * std::pow(10.0, static_cast<int>(k % 30) - 15);
        CHECK(parse_double(format_double(v)) == v);
    }
}

TEST_CASE("split_csv_line handles quotes")
{
    const auto f = split_csv_line(R"(a,"b,c","d""e",)");
    REQUIRE(f.size() == 4);
    CHECK(f[1] == "b,c");
    CHECK(f[2] == "d\"e");
    CHECK(f[3].empty());
    CHECK(split_csv_line(quote_csv_field("x,\"y\"")).at(0) == "x,\"y\"");
}
