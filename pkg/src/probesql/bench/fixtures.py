"""Tiny SQLite databases for the smoke benchmark."""

from __future__ import annotations

import sqlite3
from pathlib import Path

SCHOOLS_DDL = """
CREATE TABLE schools (CDSCode TEXT PRIMARY KEY, School TEXT, County TEXT, City TEXT, Charter INTEGER, OpenDate TEXT);
CREATE TABLE frpm (CDSCode TEXT REFERENCES schools(CDSCode), "Enrollment (K-12)" REAL,
                   "Free Meal Count (K-12)" REAL, "Charter School (Y/N)" INTEGER);
CREATE TABLE satscores (cds TEXT REFERENCES schools(CDSCode), sname TEXT, NumTstTakr INTEGER,
                        AvgScrMath INTEGER, AvgScrRead INTEGER);
"""

# code, school, county, city, charter, opened, enrollment, free meals, takers, math, read
SCHOOLS = [
    ("01001", "Alder High", "Alameda", "Oakland", 0, "1961-09-01", 1450, 610, 402, 548, 530),
    ("01002", "Bay Charter", "Alameda", "Berkeley", 1, "2004-08-15", 380, 301, 95, 571, 560),
    ("01003", "Cedar Prep", "Alameda", "Fremont", 0, "1988-09-03", 2100, 420, 655, 612, 590),
    ("01004", "Dune Academy", "Alameda", "Hayward", 1, "2010-08-20", 520, 455, 120, 489, 472),
    ("01005", "Elm Secondary", "Alameda", "Oakland", 0, "1975-09-02", 990, 505, 260, 515, 508),
    ("10001", "Fig Valley High", "Fresno", "Fresno", 0, "1959-09-05", 1820, 1302, 470, 498, 486),
    ("10002", "Granite Charter", "Fresno", "Clovis", 1, "2008-08-18", 410, 122, 88, 583, 571),
    ("10003", "Harbor Tech", "Fresno", "Fresno", 0, "1992-09-01", 1230, 880, 301, 505, 492),
    ("10004", "Iris Magnet", "Fresno", "Clovis", 0, "2001-08-30", 760, 190, 214, 566, 575),
    ("15001", "Juniper High", "Kern", "Bakersfield", 0, "1966-09-06", 2400, 1650, 702, 479, 470),
    ("15002", "Kestrel Charter", "Kern", "Delano", 1, "2012-08-14", 300, 251, 61, 468, 455),
    ("15003", "Laurel Prep", "Kern", "Bakersfield", 0, "1999-09-01", 1100, 640, 330, 531, 527),
]

SHOP_DDL = """
CREATE TABLE customers (id INTEGER PRIMARY KEY, name TEXT, country TEXT, segment TEXT);
CREATE TABLE products (id INTEGER PRIMARY KEY, name TEXT, category TEXT, price REAL);
CREATE TABLE orders (id INTEGER PRIMARY KEY, customer_id INTEGER REFERENCES customers(id),
                     product_id INTEGER REFERENCES products(id), quantity INTEGER, order_date TEXT);
CREATE TABLE sales_2017 (order_id INTEGER, region TEXT, amount REAL);
CREATE TABLE sales_2018 (order_id INTEGER, region TEXT, amount REAL);
"""

CUSTOMERS = [
    (1, "Ava Stone", "Canada", "retail"), (2, "Ben Ortiz", "USA", "retail"), (3, "Cleo Park", "Canada", "business"),
    (4, "Dev Rao", "India", "business"), (5, "Eli Wong", "USA", "retail"), (6, "Fay Lund", "Canada", "retail"),
    (7, "Gus Berg", "Germany", "business"), (8, "Hana Ito", "Japan", "retail"),
]
PRODUCTS = [
    (1, "Hammer", "Tools", 12.5), (2, "Drill", "Tools", 89.0), (3, "Lamp", "Home", 24.0),
    (4, "Rug", "Home", 60.0), (5, "Saw", "Tools", 19.75), (6, "Mug", "Kitchen", 6.5),
]
ORDERS = [
    (1, 1, 1, 2, "2018-01-04"), (2, 1, 3, 1, "2018-01-09"), (3, 2, 2, 1, "2018-02-11"), (4, 3, 5, 4, "2018-02-20"),
    (5, 3, 6, 6, "2018-03-02"), (6, 4, 4, 1, "2018-03-15"), (7, 5, 1, 1, "2018-04-01"), (8, 6, 2, 2, "2018-04-18"),
    (9, 7, 3, 3, "2018-05-05"), (10, 8, 6, 2, "2018-05-21"), (11, 2, 5, 1, "2018-06-03"), (12, 6, 4, 1, "2018-06-30"),
]
SALES_2017 = [(101, "North", 540.0), (102, "South", 910.0), (103, "East", 300.0), (104, "North", 220.0)]
SALES_2018 = [(201, "North", 410.0), (202, "South", 380.0), (203, "East", 760.0), (204, "West", 290.0),
              (205, "South", 200.0), (206, "East", 95.0)]

METRICS_DDL = """
CREATE TABLE entities (entity_id INTEGER PRIMARY KEY, name TEXT, kind TEXT);
CREATE TABLE observations (entity_id INTEGER REFERENCES entities(entity_id), metric_id TEXT, year INTEGER, value REAL);
"""

ENTITIES = [(1, "Avalon", "country"), (2, "Borvia", "country"), (3, "Cestra", "country"),
            (4, "Delta City", "city"), (5, "Eastport", "city")]
OBSERVATIONS = [
    (1, "GDP", 2020, 410.0), (2, "GDP", 2020, 275.5), (3, "GDP", 2020, 198.25), (4, "GDP", 2020, 88.0),
    (1, "GDP", 2021, 430.0), (2, "GDP", 2021, 281.0), (1, "POP", 2021, 12.4), (2, "POP", 2021, 9.1),
    (3, "POP", 2021, 15.8), (4, "POP", 2021, 2.2), (5, "POP", 2021, 1.7), (5, "GDP", 2020, 41.0),
]


def _create(path: Path, ddl: str, inserts: list[tuple[str, list[tuple]]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        path.unlink()
    conn = sqlite3.connect(path)
    try:
        conn.executescript(ddl)
        for sql, rows in inserts:
            conn.executemany(sql, rows)
        conn.commit()
    finally:
        conn.close()
    return path


def build_schools(path: Path) -> Path:
    return _create(path, SCHOOLS_DDL, [
        ("INSERT INTO schools VALUES (?,?,?,?,?,?)", [r[:6] for r in SCHOOLS]),
        ("INSERT INTO frpm VALUES (?,?,?,?)", [(r[0], r[6], r[7], r[4]) for r in SCHOOLS]),
        ("INSERT INTO satscores VALUES (?,?,?,?,?)", [(r[0], r[1], r[8], r[9], r[10]) for r in SCHOOLS]),
    ])


def build_shop(path: Path) -> Path:
    return _create(path, SHOP_DDL, [
        ("INSERT INTO customers VALUES (?,?,?,?)", CUSTOMERS),
        ("INSERT INTO products VALUES (?,?,?,?)", PRODUCTS),
        ("INSERT INTO orders VALUES (?,?,?,?,?)", ORDERS),
        ("INSERT INTO sales_2017 VALUES (?,?,?)", SALES_2017),
        ("INSERT INTO sales_2018 VALUES (?,?,?)", SALES_2018),
    ])


def build_metrics(path: Path) -> Path:
    return _create(path, METRICS_DDL, [
        ("INSERT INTO entities VALUES (?,?,?)", ENTITIES),
        ("INSERT INTO observations VALUES (?,?,?,?)", OBSERVATIONS),
    ])


BUILDERS = {"schools": build_schools, "shop": build_shop, "metrics": build_metrics}
