#include "peerfx/io.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace peerfx;
using namespace peerfx::io;

namespace {

CsvTable table(const std::string& s, const std::string& what) {
  std::istringstream in(s);
  return read_csv(in, what);
}

std::string error_of(const std::string& nodes, const std::string& edges, const IngestOptions& opt = {}) {
  try {
    ingest(table(nodes, "nodes"), table(edges, "edges"), opt);
  } catch (const InputError& e) {
    return e.what();
  }
  return "";
}

const char* kNodes =
    "school_id,node_id,x1,grade,gpa\n"
    "A,a1,1.5,9,3.0\n"
    "A,a2,2,10,2.5\n"
    "A,a3,-1,9,3.5\n"
    "B,b1,0,11,2.0\n"
    "B,b2,4,10,1.0\n";

}  // namespace

TEST(Csv, SplitsQuotedFields) {
  const auto f = split_csv_line(R"( a ,"b,c","d ""e""" ,)");
  ASSERT_EQ(f.size(), 4u);
  EXPECT_EQ(f[0], "a");
  EXPECT_EQ(f[1], "b,c");
  EXPECT_EQ(f[2], "d \"e\"");
  EXPECT_EQ(f[3], "");
}

TEST(Ingest, BuildsSchoolsInFileOrder) {
  const auto ds = ingest(table(kNodes, "nodes"), table("school_id,src,dst\nA,a1,a2\nA,a3,a2\nB,b2,b1\nA,a1,a2\n", "edges"));
  ASSERT_EQ(ds.nets.size(), 2u);
  EXPECT_EQ(ds.nets[0].school_id(), "A");
  EXPECT_EQ(ds.nets[0].n(), 3);
  EXPECT_EQ(ds.nets[0].G().coeff(0, 1), 1.0);
  EXPECT_EQ(ds.nets[0].G().coeff(2, 1), 1.0);
  EXPECT_EQ(ds.nets[1].G().coeff(1, 0), 1.0);
  EXPECT_EQ(ds.covariate_names, (std::vector<std::string>{"x1", "grade"}));
  EXPECT_DOUBLE_EQ(ds.data[0].X(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(ds.data[1].y(1), 1.0);
  EXPECT_EQ(ds.warnings.size(), 1u);  // duplicate edge
}

TEST(Ingest, UnknownNodeIsNamed) {
  const auto msg = error_of(kNodes, "school_id,src,dst\nA,a1,zz\n");
  EXPECT_NE(msg.find("'zz'"), std::string::npos);
  EXPECT_NE(msg.find("line 2"), std::string::npos);
  EXPECT_NE(error_of(kNodes, "school_id,src,dst\nC,a1,a2\n").find("unknown school 'C'"), std::string::npos);
}

TEST(Ingest, CrossSchoolEdgesAllListed) {
  const auto msg = error_of(kNodes, "school_id,src,dst\nA,a1,b1\nA,a2,a3\nB,b2,a3\n");
  EXPECT_NE(msg.find("A:a1->b1"), std::string::npos);
  EXPECT_NE(msg.find("B:b2->a3"), std::string::npos);
}

TEST(Ingest, MissingAndNonNumericCells) {
  std::string nodes = kNodes;
  nodes.replace(nodes.find("-1"), 2, "NA");
  EXPECT_NE(error_of(nodes, "school_id,src,dst\n").find("missing value in column 'x1'"), std::string::npos);
  std::string words = kNodes;
  words.replace(words.find(",9,3.0"), 6, ",nine,3.0");
  EXPECT_NE(error_of(words, "school_id,src,dst\n").find("declare it categorical"), std::string::npos);
  EXPECT_NE(error_of("school_id,x\n1,2\n", "school_id,src,dst\n").find("node_id"), std::string::npos);
  EXPECT_NE(error_of("school_id,node_id\nA,1\nA,1\n", "school_id,src,dst\n").find("duplicate node"),
            std::string::npos);
}

TEST(Ingest, CategoricalOneHot) {
  IngestOptions opt;
  opt.categorical = {{"grade", "9"}};
  const auto ds = ingest(table(kNodes, "nodes"), table("school_id,src,dst\n", "edges"), opt);
  EXPECT_EQ(ds.covariate_names, (std::vector<std::string>{"x1", "grade_10", "grade_11"}));
  EXPECT_EQ(ds.data[0].X.row(0).tail(2).sum(), 0.0);
  EXPECT_EQ(ds.data[0].X(1, 1), 1.0);
  EXPECT_EQ(ds.data[1].X(0, 2), 1.0);
  opt.categorical = {{"grade", "12"}};
  EXPECT_NE(error_of(kNodes, "school_id,src,dst\n", opt).find("omitted category"), std::string::npos);
  opt.categorical = {};
  opt.drop_columns = {"grade"};
  EXPECT_EQ(ingest(table(kNodes, "nodes"), table("school_id,src,dst\n", "edges"), opt).covariate_names.size(), 1u);
}

TEST(Ingest, RoundTripThroughWriters) {
  std::mt19937_64 rng(61);
  auto p = testutil::table_params(3);
  const auto smp = testutil::simulate(p, 3, 15, rng);
  const auto ds = make_dataset(smp.nets, smp.data, {"x1", "x2"});
  std::ostringstream on, oe;
  write_nodes_csv(on, ds);
  write_edges_csv(oe, ds);
  const auto back = ingest(table(on.str(), "nodes"), table(oe.str(), "edges"));
  ASSERT_EQ(back.nets.size(), 3u);
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_EQ(testutil::max_abs(back.data[s].X - smp.data[s].X), 0.0);
    EXPECT_EQ(testutil::max_abs(back.data[s].y - smp.data[s].y), 0.0);
    EXPECT_EQ(MatrixXd(back.nets[s].G() - smp.nets[s].G()).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Ingest, PackagedFixtures) {
  const std::string dir = PEERFX_DATA_DIR;
  const auto ds = ingest_files(dir + "/two_schools_nodes.csv", dir + "/two_schools_edges.csv");
  EXPECT_EQ(ds.nets.size(), 2u);
  EXPECT_TRUE(ds.has_outcome);
  EXPECT_THROW(ingest_files(dir + "/two_schools_nodes.csv", dir + "/bad_edges.csv"), InputError);
  EXPECT_THROW(read_csv_file(dir + "/does_not_exist.csv", "nodes"), InputError);
}

TEST(ConfigFile, ParsesAndValidates) {
  std::istringstream in("# comment\ndgp.lambda = 0.5\n\nmc.replications=10 # trailing\ndgp.beta = 1, 1.5\n");
  const auto c = Config::parse(in);
  EXPECT_DOUBLE_EQ(c.get_double("dgp.lambda", 0), 0.5);
  EXPECT_EQ(c.get_int("mc.replications", 0), 10);
  EXPECT_EQ(c.get_list("dgp.beta", {}), (std::vector<double>{1.0, 1.5}));
  EXPECT_EQ(c.get("missing", "d"), "d");
  EXPECT_EQ(c.unknown_keys({"dgp.lambda", "dgp.beta"}), std::vector<std::string>{"mc.replications"});
  std::istringstream dup("a=1\na=2\n");
  EXPECT_THROW(Config::parse(dup), ConfigError);
  std::istringstream noeq("just words\n");
  EXPECT_THROW(Config::parse(noeq), ConfigError);
  std::istringstream bad("n=1.5\n");
  EXPECT_THROW(Config::parse(bad).get_int("n", 0), ConfigError);
}
