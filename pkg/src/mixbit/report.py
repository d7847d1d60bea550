"""Combined teacher-vs-student report emission (JSON + CSV).

The CSV column order is fixed for CI diffing:
section,name,bops,param_bits,param_bytes,b_w,b_a_prev,exempt,ap,tp,fp,fn,value
Rows appear in this section order: teacher_cost, student_cost, teacher_eval,
student_eval, delta. Floats are written with repr() so a re-parse reproduces
the JSON values exactly.
"""

from __future__ import annotations

import csv
import io
import json
import os

from .checkpoint import atomic_write_bytes
from .costs import CostReport
from .detect_eval import EvalReport

CSV_COLUMNS = ["section", "name", "bops", "param_bits", "param_bytes", "b_w",
               "b_a_prev", "exempt", "ap", "tp", "fp", "fn", "value"]


def build_comparison(cost_teacher: CostReport, eval_teacher: EvalReport,
                     cost_student: CostReport, eval_student: EvalReport) -> dict:
    deltas = {
        "mAP50_gap": eval_teacher.map50 - eval_student.map50,
        "bops_ratio": cost_student.total_bops / cost_teacher.total_bops,
        "params_ratio": cost_student.total_param_bits / cost_teacher.total_param_bits,
        "quantized_bops_ratio": cost_student.quantized_bops_ratio,
        "quantized_params_ratio": cost_student.quantized_params_ratio,
    }
    return {
        "teacher": {"cost": cost_teacher.to_dict(), "eval": eval_teacher.to_dict()},
        "student": {"cost": cost_student.to_dict(), "eval": eval_student.to_dict()},
        "deltas": deltas,
    }


def _num(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _cost_rows(section: str, cost: CostReport) -> list[dict]:
    rows = []
    for c in cost.per_layer:
        rows.append({"section": section, "name": c.name, "bops": c.bops,
                     "param_bits": c.param_bits, "param_bytes": c.param_bits / 8,
                     "b_w": c.b_w, "b_a_prev": c.b_a_prev, "exempt": c.exempt})
    rows.append({"section": section, "name": "TOTAL", "bops": cost.total_bops,
                 "param_bits": cost.total_param_bits,
                 "param_bytes": cost.total_param_bytes})
    return rows


def _eval_rows(section: str, report: EvalReport) -> list[dict]:
    rows = []
    for c, ap in sorted(report.per_class_ap.items()):
        n = report.counts[c]
        rows.append({"section": section, "name": f"class_{c}", "ap": ap,
                     "tp": n.tp, "fp": n.fp, "fn": n.fn})
    rows.append({"section": section, "name": "mAP50", "value": report.map50})
    return rows


def comparison_to_csv(comparison: dict, cost_teacher: CostReport,
                      eval_teacher: EvalReport, cost_student: CostReport,
                      eval_student: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    rows = (_cost_rows("teacher_cost", cost_teacher)
            + _cost_rows("student_cost", cost_student)
            + _eval_rows("teacher_eval", eval_teacher)
            + _eval_rows("student_eval", eval_student))
    for name, value in sorted(comparison["deltas"].items()):
        rows.append({"section": "delta", "name": name, "value": value})
    for row in rows:
        writer.writerow({k: _num(row.get(k)) for k in CSV_COLUMNS})
    return buf.getvalue()


def emit_report(cost_teacher: CostReport, eval_teacher: EvalReport,
                cost_student: CostReport, eval_student: EvalReport,
                path) -> dict:
    """Write the combined report as JSON at ``path`` and CSV alongside it."""
    comparison = build_comparison(cost_teacher, eval_teacher,
                                  cost_student, eval_student)
    blob = json.dumps(comparison, indent=2, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, blob + b"\n")
    csv_path = os.path.splitext(os.fspath(path))[0] + ".csv"
    csv_text = comparison_to_csv(comparison, cost_teacher, eval_teacher,
                                 cost_student, eval_student)
    atomic_write_bytes(csv_path, csv_text.encode("utf-8"))
    return comparison
