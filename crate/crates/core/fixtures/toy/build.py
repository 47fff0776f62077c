#!/usr/bin/env python3
"""Rebuilds the toy fixtures: the .sqlite files, tasks.jsonl, gold.jsonl
and script.jsonl. Every scripted SQL statement is executed against its
database and checked against the outcome the scenario expects.

Usage: python3 build.py
"""

import json
import os
import sqlite3

HERE = os.path.dirname(os.path.abspath(__file__))

OK, NULL, ERR = "ok", "null", "err"


def q(sql, expect=OK, desc="", exploration=False):
    return {"sql": sql, "expect": expect, "desc": desc, "exploration": exploration}


def probe(text, *turns, close="final: 1", insufficient=None):
    return {"text": text, "turns": list(turns), "close": close, "insufficient": insufficient}


def verdict(correct, explanation, back):
    return {"correct": correct, "explanation": explanation, "back_translated_query": back}


TASKS = [
    {
        "id": "shop_001",
        "db": "shop",
        "question": "How many orders were placed in March 2024?",
        "gold": "SELECT count(*) FROM orders WHERE order_date >= '2024-03-01' AND order_date < '2024-04-01'",
        "gold_tables": ["orders"],
        "link": ["orders"],
        "rounds": [[
            probe(
                "Which year-month values occur in orders.order_date?",
                [q("SELECT order_date FROM orders LIMIT 3", desc="peek at the date format", exploration=True),
                 q("SELECT DISTINCT substr(order_date, 1, 7) AS month FROM orders ORDER BY month", desc="distinct months")],
                close="final: 2",
            ),
            probe(
                "How many orders have an order_date from 2024-03-01 to 2024-03-31?",
                [q("SELECT count(*) AS n FROM orders WHERE order_date BETWEEN '2024-03-01' AND '2024-03-31'", desc="date range"),
                 q("SELECT count(*) AS n FROM orders WHERE strftime('%Y-%m', order_date) = '2024-03'", desc="month prefix")],
                close="Both queries agree. final: 1",
            ),
        ]],
        "planner": ["propose", "finish"],
        "proposals": ["SELECT count(*) AS n FROM orders WHERE order_date BETWEEN '2024-03-01' AND '2024-03-31'"],
        "verdicts": [verdict(True, "Counts orders dated in March 2024.", "How many orders were made in March 2024?")],
    },
    {
        "id": "shop_002",
        "db": "shop",
        "question": "Which customer spent the most in total?",
        "gold": "SELECT c.name FROM customers c JOIN orders o ON o.customer_id = c.id JOIN products p ON p.id = o.product_id "
                "GROUP BY c.id ORDER BY sum(o.quantity * p.price) DESC LIMIT 1",
        "gold_tables": ["customers", "orders", "products"],
        "link": ["customers", "orders", "products"],
        "rounds": [[
            probe(
                "What is the total spend per customer, where spend is quantity times product price?",
                [q("SELECT o.customer_id, sum(o.quantity * p.price) AS spend FROM orders o JOIN products p ON p.id = o.product_id GROUP BY o.customer_id",
                   desc="join and sum"),
                 q("SELECT o.customer_id, sum(o.qty * p.price) FROM orders o JOIN products p ON p.id = o.product_id GROUP BY 1",
                   expect=ERR, desc="guessing the column name")],
            ),
            probe(
                "What is the name of the customer with the largest total of quantity times price over their orders?",
                [q("SELECT c.name, sum(o.quantity * p.price) AS spend FROM customers c JOIN orders o ON o.customer_id = c.id "
                   "JOIN products p ON p.id = o.product_id GROUP BY c.id ORDER BY spend DESC LIMIT 1", desc="top spender")],
            ),
        ]],
        "planner": ["propose", "finish"],
        "proposals": [
            "SELECT c.name FROM customer c JOIN orders o ON o.customer_id = c.id",
            "SELECT c.name FROM customers c JOIN orders o ON o.customer_id = c.id JOIN products p ON p.id = o.product_id "
            "GROUP BY c.id ORDER BY sum(o.quantity * p.price) DESC LIMIT 1",
        ],
        "verdicts": [verdict(True, "Ranks customers by total spend and keeps the top one.", "Who is the customer with the highest total spend?")],
    },
    {
        "id": "shop_003",
        "db": "shop",
        "question": "List each product category with its total revenue, highest first.",
        "gold": "SELECT p.category, sum(o.quantity * p.price) AS revenue FROM orders o JOIN products p ON p.id = o.product_id "
                "GROUP BY p.category ORDER BY revenue DESC",
        "gold_tables": ["orders", "products"],
        "link": ["sales_ledger"],
        "rounds": [[
            probe(
                "Which product categories exist?",
                [q("SELECT * FROM products LIMIT 2", desc="look at products", exploration=True),
                 q("SELECT DISTINCT category FROM products ORDER BY category", desc="distinct categories")],
                close="final: 2",
            ),
            probe(
                "What is the revenue of each order line, computed as quantity times unit price?",
                [q("SELECT o.id, o.quantity * p.price AS revenue FROM orders o JOIN products p ON p.id = o.product_id", desc="line revenue")],
            ),
            probe(
                "What is the total revenue per product category?",
                [q("SELECT p.category, sum(o.quantity * p.price) AS revenue FROM orders o JOIN products p ON p.id = o.product_id GROUP BY p.category",
                   desc="group by category"),
                 q("SELECT category, sum(rev) FROM (SELECT p.category, o.quantity * p.price AS rev FROM orders o JOIN products p ON p.id = o.product_id) GROUP BY category",
                   desc="subquery first")],
            ),
        ]],
        "planner": ["propose", "finish"],
        "proposals": [
            "SELECT p.category, sum(o.quantity * p.price) AS revenue FROM orders o JOIN products p ON p.id = o.product_id "
            "GROUP BY p.category ORDER BY revenue DESC"
        ],
        "verdicts": [verdict(True, "Totals revenue per category, sorted descending.", "What is each category's revenue, largest first?")],
    },
    {
        "id": "shop_004",
        "db": "shop",
        "question": "What is the average price of garden products?",
        "gold": "SELECT avg(price) FROM products WHERE category = 'garden'",
        "gold_tables": ["products"],
        "link": ["products"],
        "rounds": [[
            probe(
                "What values does products.category take?",
                [q("SELECT category, count(*) FROM products GROUP BY category", desc="category counts")],
            ),
            probe(
                "What is the average price of products whose category is 'garden'?",
                [q("SELECT avg(price) FROM products WHERE category = 'garden'", desc="average")],
            ),
        ]],
        "planner": ["finish", "propose", "finish"],
        "proposals": ["SELECT avg(price) AS avg_price FROM products WHERE category = 'garden'"],
        "verdicts": [verdict(True, "Averages the price over garden products.", "What do garden products cost on average?")],
    },
    {
        "id": "school_001",
        "db": "school",
        "question": "How many students are enrolled in at least one math course?",
        "gold": "SELECT count(DISTINCT e.student_id) FROM enrollments e JOIN courses c ON c.id = e.course_id WHERE c.department = 'math'",
        "gold_tables": ["enrollments", "courses"],
        "link": ["students", "courses", "enrollments"],
        "rounds": [[
            probe(
                "Which courses belong to the math department?",
                [q("SELECT id, title FROM courses WHERE department = 'math'", desc="math courses")],
            ),
            probe(
                "Which student ids have an enrollment in a math course?",
                [q("SELECT DISTINCT e.student_id FROM enrollments e JOIN courses c ON c.id = e.course_id WHERE c.department = 'math'",
                   desc="distinct students")],
            ),
        ]],
        "planner": ["propose", "finish"],
        "proposals": [
            "SELECT count(*) FROM enrollments e JOIN courses c ON c.id = e.course_id WHERE c.department = 'math'",
            "SELECT count(DISTINCT e.student_id) AS students FROM enrollments e JOIN courses c ON c.id = e.course_id WHERE c.department = 'math'",
        ],
        "verdicts": [
            verdict(False, "This counts enrollments, so a student in two math courses is counted twice.",
                    "How many math enrollments are there?"),
            verdict(True, "Counts each student once.", "How many distinct students take a math course?"),
        ],
    },
    {
        "id": "school_002",
        "db": "school",
        "question": "What is the average score in each department?",
        "gold": "SELECT c.department, avg(e.score) FROM enrollments e JOIN courses c ON c.id = e.course_id GROUP BY c.department",
        "gold_tables": ["enrollments", "courses"],
        "link": ["courses", "enrollments"],
        "rounds": [[
            probe(
                "What is the average enrollment score per course department?",
                [q("SELECT c.department, avg(e.score) AS avg_score FROM enrollments e JOIN courses c ON c.id = e.course_id GROUP BY c.department",
                   desc="group by department")],
            ),
            probe(
                "What is the average score for courses in the art department?",
                [q("SELECT avg(e.score) FROM enrollments e JOIN courses c ON c.id = e.course_id WHERE c.department = 'art' GROUP BY c.department",
                   expect=NULL, desc="art only")],
                close="There is no art department in the data, so this probe has no answer.",
            ),
        ]],
        "planner": ["propose", "finish"],
        "proposals": [
            "SELECT c.department, avg(e.score) AS avg_score FROM enrollments e JOIN courses c ON c.id = e.course_id GROUP BY c.department"
        ],
        "verdicts": [verdict(True, "Averages scores per department.", "What is the mean score for every department?")],
    },
    {
        "id": "school_003",
        "db": "school",
        "question": "Which house has the highest average score in term 2024S?",
        "gold": "SELECT s.house FROM students s JOIN enrollments e ON e.student_id = s.id WHERE e.term = '2024S' "
                "GROUP BY s.house ORDER BY avg(e.score) DESC LIMIT 1",
        "gold_tables": ["students", "enrollments"],
        "link": ["students", "enrollments"],
        "rounds": [[
            probe(
                "Which term labels appear in enrollments?",
                [q("SELECT DISTINCT term FROM enrollments ORDER BY term", desc="terms")],
            ),
            probe(
                "What is the average 2024S score for each house?",
                [q("SELECT s.house, avg(e.score) AS avg_score FROM students s JOIN enrollments e ON e.student_id = s.id "
                   "WHERE e.term = '2024S' GROUP BY s.house", desc="per house"),
                 q("SELECT house, avg(score) FROM students JOIN enrollments WHERE term = '2024S' GROUP BY house",
                   desc="implicit join, missing the key")],
            ),
        ]],
        "planner": ["propose", "finish"],
        "proposals": [
            "WITH h AS (SELECT s.house, avg(e.score) AS a FROM students s JOIN enrollments e ON e.student_id = s.id "
            "WHERE e.term = '2024S' GROUP BY s.house) SELECT house FROM h WHERE a = (SELECT max(a) FROM h)"
        ],
        "verdicts": [verdict(True, "Picks the house whose 2024S average is the maximum.", "Which house averaged best in 2024S?")],
    },
    {
        "id": "school_004",
        "db": "school",
        "question": "Name the students who are not enrolled in any course.",
        "gold": "SELECT name FROM students WHERE id NOT IN (SELECT student_id FROM enrollments)",
        "gold_tables": ["students", "enrollments"],
        "link": ["students", "enrollments"],
        "rounds": [
            [
                probe(
                    "Which student ids appear in enrollments?",
                    [q("SELECT DISTINCT student_id FROM enrollments ORDER BY student_id", desc="enrolled ids")],
                ),
                probe(
                    "List every student id with its name.",
                    [q("SELECT id, name FROM students ORDER BY id", desc="all students")],
                ),
            ],
            [
                probe(
                    "Which students have no row at all in enrollments?",
                    [q("SELECT s.name FROM students s LEFT JOIN enrollments e ON e.student_id = s.id WHERE e.student_id IS NULL",
                       desc="anti join"),
                     q("SELECT name FROM students WHERE id NOT IN (SELECT student_id FROM enrollments)", desc="not in")],
                ),
            ],
        ],
        "planner": [("generate", 1), "propose", "finish"],
        "proposals": ["SELECT s.name FROM students s WHERE NOT EXISTS (SELECT 1 FROM enrollments e WHERE e.student_id = s.id)"],
        "verdicts": [verdict(True, "Keeps students with no enrollment rows.", "Which students take no courses?")],
    },
    {
        "id": "weather_001",
        "db": "weather",
        "question": "Which station recorded the highest temperature?",
        "external_knowledge": "temp_c holds the daily maximum in degrees Celsius.",
        "gold": "SELECT s.name FROM stations s JOIN readings r ON r.station_id = s.id ORDER BY r.temp_c DESC LIMIT 1",
        "gold_tables": ["stations", "readings"],
        "link": ["stations", "readings"],
        "rounds": [[
            probe(
                "What is the highest temp_c value in readings and which station_id has it?",
                [q("SELECT station_id, temp_c FROM readings ORDER BY temp_c DESC LIMIT 1", desc="order by temp"),
                 q("SELECT station_id, max(temp_c) FROM readings", desc="bare max"),
                 q("SELECT station_id, temp_c FROM readings WHERE temp_c = (SELECT max(temp_c) FROM readings)", desc="max subquery")],
                close="final: 3",
            ),
            probe(
                "What is the name of each station id?",
                [q("SELECT id, name FROM stations", desc="names")],
            ),
        ]],
        "planner": ["propose", "finish"],
        "proposals": ["SELECT s.name FROM stations s JOIN readings r ON r.station_id = s.id WHERE r.temp_c = (SELECT max(temp_c) FROM readings)"],
        "verdicts": [verdict(True, "Finds the station of the hottest reading.", "Which station had the hottest reading?")],
    },
    {
        "id": "weather_002",
        "db": "weather",
        "question": "What is the total rainfall per region, ignoring missing readings?",
        "gold": "SELECT s.region, sum(r.rain_mm) FROM readings r JOIN stations s ON s.id = r.station_id "
                "WHERE r.rain_mm IS NOT NULL GROUP BY s.region",
        "gold_tables": ["stations", "readings"],
        "link": ["stations", "readings"],
        "rounds": [[
            probe(
                "How many readings have a missing rain_mm value?",
                [q("SELECT count(*) FROM readings WHERE rain_mm IS NULL", desc="null count")],
            ),
            probe(
                "What is the sum of rain_mm per station region?",
                [q("SELECT s.region, sum(r.rain_mm) AS rain FROM readings r JOIN stations s ON s.id = r.station_id GROUP BY s.region",
                   desc="sum skips nulls"),
                 q("SELECT s.region, sum(r.rain_mm) AS rain FROM readings r JOIN stations s ON s.id = r.station_id "
                   "WHERE r.rain_mm IS NOT NULL AND s.region = 'desert' GROUP BY s.region", expect=NULL, desc="filtered")],
            ),
        ]],
        "planner": ["propose", "finish"],
        "proposals": [
            "SELECT s.region, sum(r.rain_mm) AS total_rain FROM readings r JOIN stations s ON s.id = r.station_id "
            "WHERE r.rain_mm IS NOT NULL GROUP BY s.region"
        ],
        "verdicts": [verdict(True, "Sums non-missing rainfall per region.", "How much rain fell in each region?")],
    },
    {
        "id": "weather_003",
        "db": "weather",
        "question": "How many readings at station Ridge have no rainfall value?",
        "gold": "SELECT count(*) FROM readings r JOIN stations s ON s.id = r.station_id WHERE s.name = 'Ridge' AND r.rain_mm IS NULL",
        "gold_tables": ["stations", "readings"],
        "link": ["stations", "readings"],
        "rounds": [[
            probe(
                "Which station id is named Ridge?",
                [q("SELECT id FROM stations WHERE name = 'Ridge'", desc="lookup")],
            ),
            probe("Which rain gauge model is installed at Ridge?", insufficient="The schema has no equipment columns."),
            probe(
                "How many Ridge readings have rain_mm missing?",
                [q("SELECT count(*) FROM readings r JOIN stations s ON s.id = r.station_id WHERE s.name = 'Ridge' AND r.rain_mm IS NULL",
                   desc="join and count")],
            ),
        ]],
        "planner": ["propose", "finish"],
        "proposals": ["SELECT count(*) AS missing FROM readings WHERE station_id = (SELECT id FROM stations WHERE name = 'Ridge') AND rain_mm IS NULL"],
        "verdicts": [verdict(True, "Counts Ridge readings with a NULL rainfall.", "How many Ridge readings lack rainfall?")],
    },
    {
        "id": "weather_004",
        "db": "weather",
        "question": "What is the average temperature at stations above 500 m elevation?",
        "gold": "SELECT avg(r.temp_c) FROM readings r JOIN stations s ON s.id = r.station_id WHERE s.elevation_m > 500",
        "gold_tables": ["stations", "readings"],
        "link": ["stations", "readings"],
        "rounds": [[
            probe(
                "Which stations have an elevation above 500 metres?",
                [q("SELECT name, elevation_m FROM stations WHERE elevation_m > 500", desc="high stations")],
            ),
            probe(
                "What is the average temp_c over readings from stations with elevation_m at least 45?",
                [q("SELECT avg(r.temp_c) FROM readings r JOIN stations s ON s.id = r.station_id WHERE s.elevation_m >= 45",
                   desc="average")],
            ),
        ]],
        "planner": ["propose", "finish"],
        "proposals": ["SELECT avg(r.temp_c) FROM readings r JOIN stations s ON s.id = r.station_id WHERE s.elevation_m >= 45"],
        "verdicts": [verdict(True, "Averages temperatures for the higher stations.", "What is the mean temperature at elevated stations?")],
    },
]


def build_db(name):
    path = os.path.join(HERE, f"{name}.sqlite")
    if os.path.exists(path):
        os.remove(path)
    conn = sqlite3.connect(path)
    with open(os.path.join(HERE, f"{name}.sql")) as f:
        conn.executescript(f.read())
    conn.commit()
    conn.execute("VACUUM")
    conn.close()


def outcome(conn, sql):
    try:
        rows = conn.execute(sql).fetchall()
    except sqlite3.Error:
        return ERR
    return OK if rows else NULL


def check(conn, sql, expect, where):
    got = outcome(conn, sql)
    if got != expect:
        raise SystemExit(f"{where}: expected {expect}, got {got}: {sql}")


def rec(role, task, probe_id=None, text=None, tool=None, args=None):
    r = {"role_tag": role, "task": task}
    if probe_id is not None:
        r["probe"] = probe_id
    if text is not None:
        r["text"] = text
    if tool is not None:
        r["tool_calls"] = [{"name": tool, "arguments": args}]
    return r


def script_for(t, conn):
    tid = t["id"]
    out = [rec("generate", tid, text=json.dumps({"tables": t["link"]}))]
    rounds = list(t["rounds"])
    first = rounds.pop(0)
    out.append(rec("plan", tid, tool="generate_testcase", args={"probes": [p["text"] for p in first]}))
    numbered = []
    n = 0
    for rnd in [first] + rounds:
        for p in rnd:
            n += 1
            numbered.append((f"p{n}", p))
    for action in t["planner"]:
        if isinstance(action, tuple):
            texts = [p["text"] for p in rounds.pop(0)]
            out.append(rec("plan", tid, tool="generate_testcase", args={"probes": texts}))
        elif action == "propose":
            out.append(rec("plan", tid, tool="propose_final_sql", args={}))
        else:
            out.append(rec("plan", tid, tool="finish", args={}))
    for pid, p in numbered:
        if p["insufficient"]:
            out.append(rec("generate", tid, pid, tool="not_enough_information", args={"reason": p["insufficient"]}))
            continue
        for turn in p["turns"]:
            queries = []
            for qq in turn:
                check(conn, qq["sql"], qq["expect"], f"{tid}/{pid}")
                item = {"description": qq["desc"], "sql_query": qq["sql"]}
                if qq["exploration"]:
                    item["exploration"] = True
                queries.append(item)
            out.append(rec("generate", tid, pid, tool="execute_sql", args={"queries": queries}))
        out.append(rec("generate", tid, pid, text=p["close"]))
    for sql in t["proposals"]:
        out.append(rec("propose", tid, text=f"Using the probe results:\n```sql\n{sql}\n```"))
    for v in t["verdicts"]:
        out.append(rec("verify", tid, text=json.dumps(v)))
    return out


def main():
    for name in ("shop", "school", "weather"):
        build_db(name)
    tasks, golds, script = [], [], []
    for t in TASKS:
        conn = sqlite3.connect(os.path.join(HERE, f"{t['db']}.sqlite"))
        check(conn, t["gold"], OK, f"{t['id']} gold")
        task = {"instance_id": t["id"], "question": t["question"], "db_id": t["db"], "gold_tables": t["gold_tables"]}
        if "external_knowledge" in t:
            task["external_knowledge"] = t["external_knowledge"]
        tasks.append(task)
        golds.append({"instance_id": t["id"], "gold_sql": t["gold"]})
        script.extend(script_for(t, conn))
        conn.close()
    for name, rows in (("tasks.jsonl", tasks), ("gold.jsonl", golds), ("script.jsonl", script)):
        with open(os.path.join(HERE, name), "w") as f:
            for r in rows:
                f.write(json.dumps(r, sort_keys=True) + "\n")
    print(f"{len(tasks)} tasks, {len(script)} script records")


if __name__ == "__main__":
    main()
