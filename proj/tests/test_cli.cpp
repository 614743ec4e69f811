#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <fstream>

#include "cellflow/cli.hpp"
#include "cellflow/transcript.hpp"
#include "support.hpp"

using namespace cellflow;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Ran {
    int code = -1;
    std::string out;
};

Ran cellflow_cmd(const std::string& args) {
    const auto cmd = std::string(CELLFLOW_BINARY) + " " + args + " 2>&1";
    Ran r;
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    while (auto n = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

void write(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream(p) << text;
}

/// A workdir with one input file, a three-reply script and a config pointing at both.
struct Fixture {
    cftest::TempDir dir;

    Fixture() {
        write(dir / "work/data.csv", "x\n41\n");
        json replies = {
            "<Advance to Next STEP>\n" + cftest::goal("read the data",
                                                      "import csv\nrows = list(csv.DictReader(open('data.csv')))\n"
                                                      "print(int(rows[0]['x']) + 1)"),
            "<end_step>",
            "<Fulfill USER INSTRUCTION>\n" + cftest::md("The answer is @answer[42]"),
        };
        write(dir / "script.json", json{{"replies", replies}}.dump());
        write(dir / "config.json", json{{"session", {{"workdir", "work"}, {"timeout_seconds", 60}}},
                                        {"provider", {{"kind", "scripted"}, {"script", "script.json"}}},
                                        {"executor", {{"backend", "local"}}},
                                        {"prices", {{"gpt-4o", {{"input_per_1k", "0.005"}, {"output_per_1k", "0.015"}}}}}}
                                       .dump(2));
        write(dir / "instruction.md", "Add one to x.");
    }

    Ran run() {
        return cellflow_cmd("-c " + q(dir / "config.json") + " run --instruction " + q(dir / "instruction.md") +
                            " --transcript " + q(dir / "t.jsonl") + " --notebook " + q(dir / "nb.ipynb"));
    }
};

}  // namespace

TEST(Cli, RunWritesTranscriptAndNotebook) {
    Fixture f;
    const auto r = f.run();
    ASSERT_EQ(r.code, kExitOk) << r.out;
    EXPECT_NE(r.out.find("outcome: Fulfilled"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("transcript: "), std::string::npos);
    ASSERT_TRUE(fs::exists(f.dir / "t.jsonl"));
    ASSERT_TRUE(fs::exists(f.dir / "nb.ipynb"));

    const auto events = read_transcript(f.dir / "t.jsonl");
    ASSERT_FALSE(events.empty());
    EXPECT_EQ(events.front().type, EventType::UserInput);
    EXPECT_EQ(events.back().type, EventType::Final);
    bool saw_42 = false;
    for (const auto& e : events) {
        if (e.type == EventType::Execution && e.payload.dump().find("42\\n") != std::string::npos) saw_42 = true;
    }
    EXPECT_TRUE(saw_42);

    const auto nb = json::parse(std::ifstream(f.dir / "nb.ipynb"));
    EXPECT_EQ(nb["nbformat"], 4);
    EXPECT_FALSE(nb["cells"].empty());
}

TEST(Cli, ReplayIsIdenticalAndPromptEditDiverges) {
    Fixture f;
    ASSERT_EQ(f.run().code, kExitOk);
    const auto before = fs::last_write_time(f.dir / "t.jsonl");

    const auto same = cellflow_cmd("replay --transcript " + q(f.dir / "t.jsonl"));
    EXPECT_EQ(same.code, kExitOk) << same.out;
    EXPECT_NE(same.out.find("replay identical"), std::string::npos);
    EXPECT_EQ(fs::last_write_time(f.dir / "t.jsonl"), before);

    fs::copy(fs::path(CELLFLOW_TEST_DATA).parent_path().parent_path() / "prompts", f.dir / "prompts");
    const auto untouched = cellflow_cmd("replay --transcript " + q(f.dir / "t.jsonl") + " --prompts-dir " +
                                        q(f.dir / "prompts"));
    EXPECT_EQ(untouched.code, kExitOk) << untouched.out;

    std::string text;
    {
        std::ifstream in(f.dir / "prompts/planning.txt");
        text.assign(std::istreambuf_iterator<char>(in), {});
    }
    ASSERT_FALSE(text.empty());
    text[text.size() / 2] = text[text.size() / 2] == 'x' ? 'y' : 'x';
    write(f.dir / "prompts/planning.txt", text);
    const auto edited = cellflow_cmd("replay --transcript " + q(f.dir / "t.jsonl") + " --prompts-dir " +
                                     q(f.dir / "prompts"));
    EXPECT_EQ(edited.code, kExitDivergence) << edited.out;
    EXPECT_NE(edited.out.find("diverged"), std::string::npos);
}

TEST(Cli, ReplayNeedsRecordedInputs) {
    Fixture f;
    ASSERT_EQ(f.run().code, kExitOk);
    fs::remove(f.dir / "work/data.csv");
    const auto r = cellflow_cmd("replay --transcript " + q(f.dir / "t.jsonl"));
    EXPECT_NE(r.code, kExitOk);
    EXPECT_NE(r.out.find("data.csv"), std::string::npos) << r.out;
}

TEST(Cli, ResumeAppendsFollowUp) {
    Fixture f;
    ASSERT_EQ(f.run().code, kExitOk);
    const auto first = read_transcript(f.dir / "t.jsonl").size();
    write(f.dir / "script2.json",
          json::array({"<Advance to Next STEP>\n" + cftest::goal("check", "print(int(open('data.csv').read().split()[1]) + 1)"),
                       "<end_step>", "<Fulfill USER INSTRUCTION>\n" + cftest::md("Still 42.")})
              .dump());
    write(f.dir / "config2.json", json{{"provider", {{"kind", "scripted"}, {"script", "script2.json"}}}}.dump());
    const auto r = cellflow_cmd("-c " + q(f.dir / "config2.json") + " resume --transcript " + q(f.dir / "t.jsonl") +
                                " --followup 'is it still 42?' --notebook " + q(f.dir / "nb2.ipynb"));
    ASSERT_EQ(r.code, kExitOk) << r.out;
    const auto events = read_transcript(f.dir / "t.jsonl");
    EXPECT_GT(events.size(), first);
    int user_inputs = 0;
    for (const auto& e : events) user_inputs += e.type == EventType::UserInput;
    EXPECT_EQ(user_inputs, 2);
    for (std::size_t i = 0; i < events.size(); ++i) EXPECT_EQ(events[i].seq, static_cast<std::int64_t>(i + 1));
}

TEST(Cli, ExportNotebookIsSchemaValid) {
    Fixture f;
    ASSERT_EQ(f.run().code, kExitOk);
    const auto r = cellflow_cmd("export-notebook --transcript " + q(f.dir / "t.jsonl") + " --out " +
                                q(f.dir / "export.ipynb"));
    ASSERT_EQ(r.code, kExitOk) << r.out;
    const auto cmd = "python3 -c \"import json,sys,jsonschema; jsonschema.validate(json.load(open(sys.argv[1])), "
                     "json.load(open(sys.argv[2]))); print('valid')\" " +
                     q(f.dir / "export.ipynb") + " '" + CELLFLOW_TEST_DATA + "/nbformat.v4.5.schema.json' 2>&1";
    std::string out;
    if (FILE* p = ::popen(cmd.c_str(), "r")) {
        char buf[512];
        while (std::fgets(buf, sizeof buf, p)) out += buf;
        ::pclose(p);
    }
    EXPECT_EQ(out, "valid\n");
    const auto exported = json::parse(std::ifstream(f.dir / "export.ipynb"));
    const auto live = json::parse(std::ifstream(f.dir / "nb.ipynb"));
    EXPECT_EQ(exported["cells"].size(), live["cells"].size());
}

TEST(Cli, StatsTableAndJson) {
    Fixture f;
    ASSERT_EQ(f.run().code, kExitOk);
    const auto table = cellflow_cmd("stats --transcripts " + q(f.dir / "*.jsonl"));
    ASSERT_EQ(table.code, kExitOk) << table.out;
    EXPECT_NE(table.out.find("Avg. LLM Calls"), std::string::npos);
    const auto j = cellflow_cmd("stats --json --transcripts " + q(f.dir / "t.jsonl"));
    ASSERT_EQ(j.code, kExitOk);
    const auto s = json::parse(j.out);
    EXPECT_EQ(s["avg_llm_calls"], 3.0);
    EXPECT_EQ(s["avg_planning_entries"], 2.0);
    EXPECT_EQ(s["avg_repair_entries"], 0.0);
    EXPECT_EQ(cellflow_cmd("stats --transcripts " + q(f.dir / "none*.jsonl")).code, kExitUsage);
}

TEST(Cli, BenchOnEmptyDirectory) {
    cftest::TempDir dir;
    fs::create_directories(dir / "tasks");
    const auto r = cellflow_cmd("bench --tasks " + q(dir / "tasks") + " --out " + q(dir / "out") + " --report " +
                                q(dir / "report.json"));
    EXPECT_EQ(r.code, kExitOk) << r.out;
    EXPECT_NE(r.out.find("no tasks found"), std::string::npos);
    const auto report = json::parse(std::ifstream(dir / "report.json"));
    EXPECT_TRUE(report["tasks"].empty());
}

TEST(Cli, UsageErrors) {
    EXPECT_EQ(cellflow_cmd("").code, kExitUsage);
    EXPECT_EQ(cellflow_cmd("fly").code, kExitUsage);
    EXPECT_EQ(cellflow_cmd("run").code, kExitUsage);
    EXPECT_EQ(cellflow_cmd("run --instruction x --bogus").code, kExitUsage);
    EXPECT_EQ(cellflow_cmd("replay --transcript /nonexistent.jsonl").code, kExitUsage);
    EXPECT_EQ(cellflow_cmd("--help").code, kExitOk);

    Fixture f;
    EXPECT_EQ(cellflow_cmd("-c " + q(f.dir / "config.json") + " run --max-debug -1 --instruction " +
                           q(f.dir / "instruction.md"))
                  .code,
              kExitUsage);
    write(f.dir / "secret.json", R"({"provider": {"kind": "http", "api_key": "sk-123"}})");
    const auto r = cellflow_cmd("-c " + q(f.dir / "secret.json") + " run --instruction " + q(f.dir / "instruction.md"));
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.out.find("environment variable"), std::string::npos);
}

TEST(Cli, InProcessEntryPoint) {
    EXPECT_EQ(cli_main(std::vector<std::string>{"cellflow"}), kExitUsage);
}
