"""The sf_bq028 package-popularity fixture: a seeded miniature of the deps.dev tables.

The data reproduces the trap in the original task: publication timestamps are
missing for a large share of NPM releases (437 of 1000 here, inserted first so
any ``LIMIT 10`` sample shows only NULLs), so ordering by them picks the wrong
latest version. The release ordinal inside the ``VersionInfo`` JSON is reliable.
"""

from __future__ import annotations

import json
import random
import sqlite3
from pathlib import Path

from ..metrics import extract_gold_columns
from ..schema import ColumnRef, introspect_sqlite, schema_to_dict
from ..sqlexec import ExecError, compare, execute, ResultSet
from .script import ScriptBuilder, action, refine, sql_action
from .smoke import FixtureError

QID = "sf_bq028"
SEED = 28
N_PACKAGES = 200
RELEASES_PER_PACKAGE = 5
NULL_RELEASES = 437
SNAPSHOT = 1_700_000_000
QUESTION = ("Considering only the latest release versions of NPM packages, which packages are the top 8 most "
            "popular based on the Github star number, as well as their versions?")

DDL = """
CREATE TABLE PROJECTS (Name TEXT, Type TEXT, StarsCount INTEGER, SnapshotAt INTEGER);
CREATE TABLE PACKAGEVERSIONS (Name TEXT, Version TEXT, System TEXT, VersionInfo TEXT,
                              UpstreamPublishedAt INTEGER, SnapshotAt INTEGER);
CREATE TABLE PACKAGEVERSIONTOPROJECT (System TEXT, Name TEXT, Version TEXT, ProjectType TEXT,
                                      ProjectName TEXT, RelationType TEXT);
"""

DESCRIPTIONS = {
    "PROJECTS.Name": "Project identifier, e.g. 'steven-tey/dub'",
    "PROJECTS.Type": "Project host type, e.g. 'GITHUB', 'GITLAB'",
    "PROJECTS.StarsCount": "Number of stars for the project",
    "PROJECTS.SnapshotAt": "Timestamp of the data snapshot",
    "PACKAGEVERSIONS.Name": "Package name, e.g. '@dub/ui'",
    "PACKAGEVERSIONS.Version": "Version string, e.g. '1.1.6'",
    "PACKAGEVERSIONS.System": "Package system, e.g. 'NPM', 'PYPI'",
    "PACKAGEVERSIONS.VersionInfo": "JSON object with IsRelease (boolean) and Ordinal (number)",
    "PACKAGEVERSIONS.UpstreamPublishedAt": "Publication timestamp",
    "PACKAGEVERSIONS.SnapshotAt": "Timestamp of the data snapshot",
    "PACKAGEVERSIONTOPROJECT.System": "Package system",
    "PACKAGEVERSIONTOPROJECT.Name": "Package name",
    "PACKAGEVERSIONTOPROJECT.Version": "Package version",
    "PACKAGEVERSIONTOPROJECT.ProjectType": "Type of the linked project, e.g. 'GITHUB'",
    "PACKAGEVERSIONTOPROJECT.ProjectName": "Name of the linked project",
    "PACKAGEVERSIONTOPROJECT.RelationType": "Relationship type, e.g. 'SOURCE_REPO_TYPE'",
}

KNOWLEDGE = """# deps.dev notes

`VersionInfo` is a JSON object. `IsRelease` is true for non-prerelease versions.
`Ordinal` orders the versions of one package: larger means newer.
Projects are linked to package versions through PACKAGEVERSIONTOPROJECT.
"""

GOLD_SQL = """
SELECT pv.Name, pv.Version
FROM PACKAGEVERSIONS AS pv
JOIN PACKAGEVERSIONTOPROJECT AS link ON link.Name = pv.Name AND link.Version = pv.Version
JOIN PROJECTS AS p ON p.Name = link.ProjectName
WHERE pv.System = 'NPM'
  AND json_extract(pv.VersionInfo, '$.IsRelease') = 1
  AND link.ProjectType = 'GITHUB'
  AND p.Type = 'GITHUB'
  AND json_extract(pv.VersionInfo, '$.Ordinal') = (
      SELECT MAX(json_extract(v2.VersionInfo, '$.Ordinal')) FROM PACKAGEVERSIONS AS v2
      WHERE v2.Name = pv.Name AND v2.System = 'NPM' AND json_extract(v2.VersionInfo, '$.IsRelease') = 1)
ORDER BY p.StarsCount DESC
LIMIT 8
""".strip()

AGENT_SQL = """
WITH LatestReleases AS (
    SELECT "Name", "Version",
           ROW_NUMBER() OVER (PARTITION BY "Name"
                              ORDER BY json_extract("VersionInfo", '$.Ordinal') DESC) AS version_rank
    FROM "PACKAGEVERSIONS"
    WHERE "System" = 'NPM' AND json_extract("VersionInfo", '$.IsRelease') = 1
),
PackageProjects AS (
    SELECT DISTINCT lr."Name", lr."Version", pvp."ProjectName"
    FROM LatestReleases lr
    JOIN "PACKAGEVERSIONTOPROJECT" pvp
      ON lr."Name" = pvp."Name" AND lr."Version" = pvp."Version" AND pvp."ProjectType" = 'GITHUB'
    WHERE lr.version_rank = 1
)
SELECT pp."Name" AS PackageName, pp."Version", p."StarsCount"
FROM PackageProjects pp
JOIN "PROJECTS" p ON pp."ProjectName" = p."Name" AND p."Type" = 'GITHUB'
ORDER BY p."StarsCount" DESC
LIMIT 8
""".strip()

# what a model that trusts the timestamp column would write
BASELINE_SQL = """
WITH ranked AS (
    SELECT "Name", "Version",
           ROW_NUMBER() OVER (PARTITION BY "Name" ORDER BY "UpstreamPublishedAt" DESC) AS rn
    FROM "PACKAGEVERSIONS"
    WHERE "System" = 'NPM' AND json_extract("VersionInfo", '$.IsRelease') = 1
      AND "UpstreamPublishedAt" IS NOT NULL
)
SELECT r."Name", r."Version", p."StarsCount"
FROM ranked r
JOIN "PACKAGEVERSIONTOPROJECT" l ON l."Name" = r."Name" AND l."Version" = r."Version" AND l."ProjectType" = 'GITHUB'
JOIN "PROJECTS" p ON p."Name" = l."ProjectName" AND p."Type" = 'GITHUB'
WHERE r.rn = 1
ORDER BY p."StarsCount" DESC
LIMIT 8
""".strip()

RELEASE_FILTER = "\"System\" = 'NPM' AND json_extract(\"VersionInfo\", '$.IsRelease') = 1"

ROUND1 = [
    f'SELECT "UpstreamPublishedAt", "VersionInfo" FROM "PACKAGEVERSIONS" WHERE {RELEASE_FILTER} LIMIT 10',
    f'SELECT "VersionInfo" FROM "PACKAGEVERSIONS" WHERE {RELEASE_FILTER} LIMIT 10',
    f'SELECT "SnapshotAt", "VersionInfo", "UpstreamPublishedAt" FROM "PACKAGEVERSIONS" WHERE {RELEASE_FILTER} '
    'AND "UpstreamPublishedAt" IS NULL LIMIT 10',
]
ROUND2 = [
    f'SELECT COUNT(*) AS null_count FROM "PACKAGEVERSIONS" WHERE {RELEASE_FILTER} AND "UpstreamPublishedAt" IS NULL',
]
ROUND3 = [
    f'SELECT "VersionInfo" FROM "PACKAGEVERSIONS" WHERE {RELEASE_FILTER} LIMIT 5',
    'SELECT DISTINCT "ProjectName" FROM "PACKAGEVERSIONTOPROJECT" WHERE "ProjectType" = \'GITHUB\' LIMIT 5',
]

PLAN = [
    "Keep NPM package versions that are releases",
    "Pick the latest release of each package",
    "Link each latest release to its GitHub project",
    "Rank by the project's star count and keep the top 8 with their versions",
]
PLAN_ORDINAL = [
    "Keep NPM release versions (VersionInfo IsRelease true)",
    "Rank versions per package by VersionInfo Ordinal descending and keep rank 1",
    "Join PACKAGEVERSIONTOPROJECT on Name and Version with ProjectType GITHUB",
    "Join PROJECTS of Type GITHUB, order by StarsCount descending, limit 8",
]

GOLD_COLUMNS = [
    "PACKAGEVERSIONS.Name", "PACKAGEVERSIONS.Version", "PACKAGEVERSIONS.System", "PACKAGEVERSIONS.VersionInfo",
    "PACKAGEVERSIONTOPROJECT.Name", "PACKAGEVERSIONTOPROJECT.Version", "PACKAGEVERSIONTOPROJECT.ProjectType",
    "PACKAGEVERSIONTOPROJECT.ProjectName", "PROJECTS.Name", "PROJECTS.Type", "PROJECTS.StarsCount",
]


def generate_rows(seed: int = SEED) -> dict[str, list[tuple]]:
    rng = random.Random(seed)
    names = [f"@scope{i % 17}/pkg-{i:03d}" for i in range(N_PACKAGES)]
    releases = []  # (name, version, ordinal)
    prereleases = []
    for name in names:
        for k in range(1, RELEASES_PER_PACKAGE + 1):
            releases.append((name, f"{k}.{rng.randrange(10)}.{rng.randrange(10)}", k))
        if rng.random() < 0.4:
            prereleases.append((name, f"{RELEASES_PER_PACKAGE + 1}.0.0-beta.{rng.randrange(5)}", RELEASES_PER_PACKAGE + 1))
    # every latest release lacks a timestamp, plus a random share of older ones
    latest = [r for r in releases if r[2] == RELEASES_PER_PACKAGE]
    older = [r for r in releases if r[2] != RELEASES_PER_PACKAGE]
    nulls = set(latest) | set(rng.sample(older, NULL_RELEASES - len(latest)))
    pv_null, pv_dated = [], []
    for name, version, ordinal in releases:
        info = json.dumps({"IsRelease": True, "Ordinal": ordinal})
        if (name, version, ordinal) in nulls:
            pv_null.append((name, version, "NPM", info, None, SNAPSHOT))
        else:
            published = 1_500_000_000 + ordinal * 1_000_000 + rng.randrange(500_000)
            pv_dated.append((name, version, "NPM", info, published, SNAPSHOT))
    rng.shuffle(pv_null)
    rng.shuffle(pv_dated)
    extra = []
    for name, version, ordinal in prereleases:
        extra.append((name, version, "NPM", json.dumps({"IsRelease": False, "Ordinal": ordinal}),
                      1_600_000_000 + rng.randrange(1_000_000), SNAPSHOT))
    for name in rng.sample(names, 60):  # same names in another ecosystem, newer ordinals
        extra.append((name, "9.9.9", "PYPI", json.dumps({"IsRelease": True, "Ordinal": 9}), None, SNAPSHOT))

    gitlab = set(rng.sample(names, 20))
    stars = rng.sample(range(100, 200_000), len(names) + len(gitlab))
    projects, links = [], []
    for i, name in enumerate(names):
        host = "GITLAB" if name in gitlab else "GITHUB"
        project = f"{host.lower()}-org{i % 23}/{name.split('/')[-1]}"
        # gitlab-hosted projects get the largest star counts, to punish a missing host filter
        count = stars[i] + (300_000 if host == "GITLAB" else 0)
        projects.append((project, host, count, SNAPSHOT))
        for pname, version, _ in [r for r in releases if r[0] == name] + [r for r in prereleases if r[0] == name]:
            links.append(("NPM", pname, version, host, project, "SOURCE_REPO_TYPE"))
    rng.shuffle(projects)
    return {
        "PACKAGEVERSIONS": pv_null + pv_dated + extra,
        "PROJECTS": projects,
        "PACKAGEVERSIONTOPROJECT": links,
    }


def build_database(path: Path, seed: int = SEED) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        path.unlink()
    rows = generate_rows(seed)
    conn = sqlite3.connect(path)
    try:
        conn.executescript(DDL)
        conn.executemany("INSERT INTO PACKAGEVERSIONS VALUES (?,?,?,?,?,?)", rows["PACKAGEVERSIONS"])
        conn.executemany("INSERT INTO PROJECTS VALUES (?,?,?,?)", rows["PROJECTS"])
        conn.executemany("INSERT INTO PACKAGEVERSIONTOPROJECT VALUES (?,?,?,?,?,?)", rows["PACKAGEVERSIONTOPROJECT"])
        conn.commit()
    finally:
        conn.close()
    return path


def brute_force_top8(path: Path) -> list[tuple[str, str]]:
    """Top 8 (package, latest release version) by GitHub stars, computed in Python."""
    conn = sqlite3.connect(f"file:{path}?mode=ro", uri=True)
    try:
        versions = conn.execute("SELECT Name, Version, System, VersionInfo FROM PACKAGEVERSIONS").fetchall()
        links = conn.execute("SELECT Name, Version, ProjectType, ProjectName FROM PACKAGEVERSIONTOPROJECT").fetchall()
        projects = conn.execute("SELECT Name, Type, StarsCount FROM PROJECTS").fetchall()
    finally:
        conn.close()
    latest: dict[str, tuple[int, str]] = {}
    for name, version, system, info in versions:
        doc = json.loads(info)
        if system != "NPM" or not doc.get("IsRelease"):
            continue
        if name not in latest or doc["Ordinal"] > latest[name][0]:
            latest[name] = (doc["Ordinal"], version)
    stars = {name: count for name, kind, count in projects if kind == "GITHUB"}
    scored = set()
    for name, version, ptype, project in links:
        if ptype == "GITHUB" and name in latest and latest[name][1] == version and project in stars:
            scored.add((stars[project], name, version))
    ranked = sorted(scored, reverse=True)
    if len(ranked) > 8 and ranked[7][0] == ranked[8][0]:
        raise FixtureError("tie at rank 8")
    return [(name, version) for _, name, version in ranked[:8]]


def episode_actions() -> list[str]:
    return [
        sql_action("EXPLORE", *ROUND1),
        refine(PLAN_ORDINAL, "UpstreamPublishedAt is NULL in every sampled NPM release, so it cannot order "
                             "versions. VersionInfo carries IsRelease and Ordinal but no timestamp. SnapshotAt is "
                             "one system-wide value. Use the Ordinal to find each package's latest release."),
        sql_action("EXPLORE", *ROUND2),
        refine(PLAN_ORDINAL, "437 NPM releases lack UpstreamPublishedAt; filtering on it would drop them."),
        sql_action("EXPLORE", *ROUND3),
        refine(PLAN_ORDINAL, "Ordinal is present on every release; ProjectName matches PROJECTS.Name."),
        sql_action("SQL", AGENT_SQL),
        action("CONFIRM"),
    ]


def replay_entries(db_path: Path, schema_path: Path) -> list[dict]:
    from ..schema import load_schema

    schema = load_schema(schema_path)
    builder = ScriptBuilder(schema, QUESTION, {ColumnRef.parse(c) for c in GOLD_COLUMNS}, PLAN,
                            keywords=["latest", "top 8", "version", "stars"])
    return builder.linking_entries() + [builder.realize_entry()] + builder.episode_entries(0, episode_actions())


def gold_result(path: Path) -> ResultSet:
    return ResultSet.from_rows(["Name", "Version"], brute_force_top8(path))


def verify(db_path: Path, schema_path: Path) -> None:
    expected = gold_result(db_path)
    for label, sql in (("gold", GOLD_SQL), ("agent", AGENT_SQL)):
        got = execute(sql, db_path)
        if isinstance(got, ExecError) or not compare(got, expected, "relaxed"):
            raise FixtureError(f"{QID}: {label} SQL does not reproduce the brute-force top 8")
    baseline = execute(BASELINE_SQL, db_path)
    if isinstance(baseline, ExecError) or compare(baseline, expected, "relaxed"):
        raise FixtureError(f"{QID}: the timestamp-based baseline should fail on this fixture")
    from ..schema import load_schema

    extracted = extract_gold_columns(GOLD_SQL, load_schema(schema_path)).refs
    if extracted != {ColumnRef.parse(c) for c in GOLD_COLUMNS}:
        raise FixtureError(f"{QID}: gold column list disagrees with the gold SQL")


CONFIG = """# case study: scripted backend, one sample
dataset = "."
dataset_kind = "spider"
out_dir = "runs"
workers = 1

[backend]
kind = "replay"
replay = "replay.json"

[sampling]
n = 1
"""


def build_casestudy(out: Path) -> dict[str, Path]:
    out = Path(out)
    folder = out / QID
    db = build_database(folder / "deps_dev.sqlite")
    schema = introspect_sqlite(db, descriptions=DESCRIPTIONS)
    schema_path = folder / "schema.json"
    schema_path.write_text(json.dumps(schema_to_dict(schema), indent=1) + "\n", encoding="utf-8")
    verify(db, schema_path)
    (folder / "knowledge.md").write_text(KNOWLEDGE, encoding="utf-8")
    (folder / "task.json").write_text(json.dumps({
        "instance_id": QID, "instruction": QUESTION, "db_path": "deps_dev.sqlite", "schema_path": "schema.json",
        "gold_sql": GOLD_SQL, "gold_columns": GOLD_COLUMNS,
    }, indent=1) + "\n", encoding="utf-8")
    doc = {"tasks": {QID: {"entries": replay_entries(db, schema_path)}}}
    (out / "replay.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out / "config.toml").write_text(CONFIG, encoding="utf-8")
    return {"case_dataset": out, "case_db": db, "case_replay": out / "replay.json", "case_config": out / "config.toml"}
