#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>

#include "cellflow/codec.hpp"
#include "cellflow/notebook.hpp"
#include "support.hpp"

using namespace cellflow;
using nlohmann::json;

namespace {

// Validates with the reference JSON-schema implementation; returns its stderr/stdout.
std::string validate(const std::filesystem::path& nb) {
    const auto cmd = "python3 -c \"import json,sys,jsonschema; "
                     "jsonschema.validate(json.load(open(sys.argv[1])), json.load(open(sys.argv[2]))); print('valid')\" '" +
                     nb.string() + "' '" + std::string(CELLFLOW_TEST_DATA) + "/nbformat.v4.5.schema.json' 2>&1";
    std::string out;
    if (FILE* p = ::popen(cmd.c_str(), "r")) {
        char buf[512];
        while (std::fgets(buf, sizeof buf, p)) out += buf;
        ::pclose(p);
    }
    return out;
}

std::vector<Cell> sample_trace() {
    auto pre = Cell::markdown("# Environment", Origin::Init);
    pre.id = "c1";
    auto goal = Cell::markdown("[STEP GOAL]: load", Origin::Plan);
    goal.id = "c2";
    auto code = Cell::code("import pandas as pd\npd.DataFrame()", "python", Origin::Plan);
    code.id = "c3";
    code.outputs = {CellOutput::stdout_text("hello\n"), CellOutput::stderr_text("warn\n"),
                    CellOutput::rich("text/plain", "Empty DataFrame"),
                    CellOutput::rich("application/json", R"({"a": 1})")};
    auto fixed = Cell::code("plot()", "python", Origin::Filter);
    fixed.id = "c9";
    fixed.outputs = {CellOutput::rich("image/png", "<Figure>", "outputs/c9_1.png")};
    auto err = Cell::code("boom()", "python", Origin::Exec);
    err.id = "weird id!";
    err.outputs = {CellOutput::error("NameError", "boom", {"line 1", "line 2"})};
    return {pre, goal, code, fixed, err};
}

}  // namespace

TEST(Notebook, ExportValidatesAgainstSchema) {
    cftest::TempDir dir;
    std::filesystem::create_directories(dir / "outputs");
    codec::write_file(dir / "outputs/c9_1.png", std::string("\x89PNG\r\n\x1a\n", 8));
    const auto trace = sample_trace();
    const auto text = export_notebook_text(trace, SessionMeta{"s1", "python", "gpt-x", dir.path()});
    std::ofstream(dir / "nb.ipynb") << text;
    EXPECT_EQ(validate(dir / "nb.ipynb"), "valid\n");

    const auto nb = json::parse(text);
    EXPECT_EQ(nb["nbformat"], 4);
    EXPECT_EQ(nb["nbformat_minor"], 5);
    ASSERT_EQ(nb["cells"].size(), 5u);
    EXPECT_EQ(nb["cells"][2]["execution_count"], 1);
    EXPECT_EQ(nb["cells"][3]["metadata"]["cellflow"]["origin_stage"], "Filter");
    EXPECT_EQ(nb["cells"][3]["outputs"][0]["data"]["image/png"], codec::base64_encode("\x89PNG\r\n\x1a\n"));
    EXPECT_EQ(nb["cells"][2]["outputs"][3]["data"]["application/json"]["a"], 1);
    EXPECT_EQ(nb["cells"][4]["id"], "cell-4");
    EXPECT_EQ(nb["cells"][4]["outputs"][0]["traceback"].size(), 2u);
}

TEST(Notebook, EmptyTraceIsStillValid) {
    cftest::TempDir dir;
    std::ofstream(dir / "nb.ipynb") << export_notebook_text({}, SessionMeta{});
    EXPECT_EQ(validate(dir / "nb.ipynb"), "valid\n");
}

TEST(Notebook, InvalidPayloadsAreRejected) {
    cftest::TempDir dir;
    auto bad = Cell::code("x", "python");
    bad.outputs = {CellOutput::stdout_text("\xff\xfe")};
    std::vector<Cell> t{bad};
    EXPECT_THROW(export_notebook_text(t, SessionMeta{}), SerializationError);

    auto missing = Cell::code("x", "python");
    missing.outputs = {CellOutput::rich("image/png", "", "outputs/nope.png")};
    t = {missing};
    EXPECT_THROW(export_notebook_text(t, SessionMeta{"s", "python", "m", dir.path()}), SerializationError);

    auto badjson = Cell::code("x", "python");
    badjson.outputs = {CellOutput::rich("application/json", "{nope")};
    t = {badjson};
    EXPECT_THROW(export_notebook_text(t, SessionMeta{}), SerializationError);
}
