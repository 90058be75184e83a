"""Shared query corpora for round-trip and matching tests."""

from speechsql.synth import builtin_schemas, generate_records

TABLE5 = [
    ("wimmera", "SELECT MIN(draws) FROM Wimmera WHERE byes > 1"),
    ("products", "SELECT T1.product_name FROM Products AS T1 JOIN Ref_Colors AS T2 WHERE T2.color_description = 1"),
]

HANDWRITTEN = [
    ("wimmera", "SELECT wins, losses, draws FROM wimmera"),
    ("wimmera", "SELECT wins FROM wimmera WHERE byes > 2 UNION SELECT wins FROM wimmera WHERE draws < 3"),
    ("wimmera", "SELECT wins FROM wimmera INTERSECT SELECT losses FROM wimmera"),
    ("wimmera", "SELECT wins FROM wimmera EXCEPT SELECT wins FROM wimmera WHERE against >= 10"),
    ("wimmera", "SELECT wimmera_fl FROM wimmera WHERE wimmera_fl LIKE '%ton%'"),
    ("wimmera", "SELECT wimmera_fl FROM wimmera WHERE wimmera_fl NOT LIKE 'a%'"),
    ("wimmera", "SELECT wins FROM wimmera WHERE NOT byes = 3"),
    ("wimmera", "SELECT wins FROM wimmera WHERE byes <> 3"),
    ("wimmera", "SELECT MAX(wins) FROM wimmera WHERE byes BETWEEN 1 AND 4 AND draws = 2 OR losses < 1.5"),
    ("wimmera", "SELECT wins FROM wimmera WHERE (byes = 1 OR draws = 2) AND losses = 3"),
    ("wimmera", "SELECT wins FROM wimmera WHERE byes IN (SELECT draws FROM wimmera WHERE losses > 2)"),
    ("wimmera", "SELECT wins FROM wimmera WHERE byes NOT IN (SELECT draws FROM wimmera)"),
    ("wimmera", "SELECT wins FROM wimmera WHERE byes = (SELECT MAX(byes) FROM wimmera)"),
    ("wimmera", "SELECT wins FROM wimmera WHERE byes < (SELECT AVG(byes) FROM wimmera WHERE draws > 1)"),
    ("wimmera", "SELECT wins FROM wimmera ORDER BY SUM(draws) DESC LIMIT 3"),
    ("wimmera", "SELECT COUNT(wins), AVG(draws) FROM wimmera ORDER BY wins ASC"),
    ("school", "SELECT T1.sname FROM student AS T1 JOIN pet AS T2 ON T1.sid = T2.sid WHERE T2.weight > 10"),
    ("school", "SELECT sname FROM student WHERE sid IN (SELECT sid FROM pet WHERE weight < 5)"),
    ("products", "SELECT product_name FROM products WHERE price >= 9.5;"),
    ("league", "SELECT team_name FROM team WHERE city = 'paris' AND points > 3 AND goals < 9"),
]


def roundtrip_corpus(n_total=200, seed=11):
    """(db_id, sql) pairs: both Table 5 queries, hand-written edge cases, then generated ones."""
    schemas = builtin_schemas()
    fixed = TABLE5 + HANDWRITTEN
    gen = generate_records(schemas, n_total - len(fixed), seed)
    return fixed + [(r["db_id"], r["sql"]) for r in gen]
