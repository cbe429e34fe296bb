"""Report formatting and output for gradient checks, evaluations, ablations and implicit filtering."""

import json
from datetime import datetime
from typing import Any, Dict, List, Optional

from colorama import Fore, Style, init

init()

METRIC_COLUMNS = ("rec_acc@0.25", "rec_acc@0.50", "res_acc@0.25", "res_acc@0.50", "miou")


def _fmt(value: Optional[float]) -> str:
    return "   n/a" if value is None else f"{100.0 * value:6.2f}"


class RunReporter:
    """Formats and displays the results of ``crossdiff`` commands."""

    def __init__(self, use_colors: bool = True):
        self.use_colors = use_colors
        keys = ['fail', 'warn', 'success', 'info', 'reset']
        self.colors = {
            'fail': Fore.RED,
            'warn': Fore.YELLOW,
            'success': Fore.GREEN,
            'info': Fore.CYAN,
            'reset': Style.RESET_ALL
        } if use_colors else {k: '' for k in keys}
        self.emojis = {
            'fail': '❌',
            'warn': '⚠️',
            'success': '✅',
            'info': 'ℹ️'
        } if use_colors else {k: '' for k in ['fail', 'warn', 'success', 'info']}

    def _paint(self, key: str, text: str) -> str:
        return f"{self.colors[key]}{text}{self.colors['reset']}"

    def generate_report(self, result: Dict[str, Any], format_type: str = 'human') -> str:
        """
        Generate a formatted report.

        Args:
            result: Dict with a ``kind`` of ``gradcheck``, ``eval``, ``ablation``
                or ``implicit`` and the matching payload
            format_type: 'human' or 'json'

        Returns:
            Formatted report string
        """
        if format_type.lower() == 'json':
            return self._generate_json_report(result)
        formatters = {
            'gradcheck': self._format_gradcheck,
            'eval': self._format_eval,
            'ablation': self._format_ablation,
            'implicit': self._format_implicit,
        }
        kind = result.get('kind')
        if kind not in formatters:
            raise ValueError(f"Unknown report kind '{kind}'")
        return formatters[kind](result)

    # ------------------------------------------------------------------

    def _format_gradcheck(self, result: Dict[str, Any]) -> str:
        checks = result.get('checks', [])
        lines = ["Gradient Check Report", "=" * 50,
                 f"Step: {result.get('step')}   Tolerance: {result.get('tol')}", ""]
        by_name: Dict[str, List[Dict[str, Any]]] = {}
        for check in checks:
            by_name.setdefault(check['name'], []).append(check)
        for name, runs in by_name.items():
            failed = [r for r in runs if not r['passed']]
            worst = max(r['max_error'] for r in runs)
            status = self._paint('fail', 'FAIL') if failed else self._paint('success', 'ok')
            lines.append(f"  {name:<12} {status:<4}  seeds={len(runs):<3} max_error={worst:.3e}")
            for r in failed:
                for failure in r['failures'][:3]:
                    lines.append(f"      seed {r['seed']}: {failure}")
        lines.append("")
        n_failed = sum(1 for c in checks if not c['passed'])
        if n_failed:
            lines.append(f"{self.emojis['fail']} {self._paint('fail', f'{n_failed} of {len(checks)} checks failed')}")
        else:
            lines.append(f"{self.emojis['success']} {self._paint('success', f'All {len(checks)} checks passed')}")
        return "\n".join(lines)

    def _metric_table(self, rows: Dict[str, Optional[Dict[str, float]]], label: str) -> List[str]:
        header = f"  {label:<18}" + "".join(f"{c:>14}" for c in METRIC_COLUMNS) + f"{'count':>8}"
        lines = [self._paint('info', header)]
        for name, metrics in rows.items():
            if metrics is None:
                lines.append(f"  {name:<18}" + "".join(f"{'n/a':>14}" for _ in METRIC_COLUMNS) + f"{0:>8}")
                continue
            cells = "".join(f"{_fmt(metrics.get(c)):>14}" for c in METRIC_COLUMNS)
            lines.append(f"  {name:<18}{cells}{metrics.get('count', 0):>8}")
        return lines

    def _format_eval(self, result: Dict[str, Any]) -> str:
        lines = ["Evaluation Report", "=" * 50, f"Samples: {result.get('samples', 0)}", ""]
        lines.extend(self._metric_table(result.get('subsets', {}), 'subset'))
        return "\n".join(lines)

    def _format_ablation(self, result: Dict[str, Any]) -> str:
        lines = [f"Ablation Report ({result.get('grid')})", "=" * 50,
                 f"Seeds: {result.get('seeds')}   Steps: {result.get('steps')}", ""]
        rows = {}
        for variant in result.get('variants', []):
            rows[variant['name']] = variant.get('overall')
        lines.extend(self._metric_table(rows, 'variant'))
        orderings = result.get('orderings', [])
        if orderings:
            lines.append("")
            for check in orderings:
                key = 'success' if check['holds'] else 'warn'
                lines.append(f"  {self.emojis[key]} {self._paint(key, check['description'])}")
        return "\n".join(lines)

    def _format_implicit(self, result: Dict[str, Any]) -> str:
        summary = result.get('summary', {})
        lines = ["Implicit Subset Report", "=" * 50,
                 f"Input records: {summary.get('input', 0)}",
                 f"Explicit (excluded): {summary.get('explicit_excluded', 0)}",
                 f"Accepted by rules: {summary.get('rule_accepted', 0)}",
                 f"Accepted by LLM: {summary.get('llm_accepted', 0)}",
                 f"Subset size: {summary.get('subset', 0)}", ""]
        categories = summary.get('categories', {})
        if categories:
            lines.append(self._paint('info', "Categories:"))
            for name, count in categories.items():
                lines.append(f"  {name:<12} {count}")
        splits = summary.get('splits', {})
        if splits:
            lines.append(self._paint('info', "Splits:"))
            for name, count in splits.items():
                lines.append(f"  {name:<12} {count}")
        flagged = summary.get('flagged', 0)
        if flagged:
            lines.append("")
            lines.append(f"{self.emojis['warn']} {self._paint('warn', f'{flagged} records flagged for manual review')}")
        return "\n".join(lines)

    def _generate_json_report(self, result: Dict[str, Any]) -> str:
        json_result = dict(result)
        json_result.setdefault('timestamp', datetime.now().isoformat())
        return json.dumps(json_result, indent=2, ensure_ascii=False, sort_keys=True)

    # ------------------------------------------------------------------

    def print_summary(self, result: Dict[str, Any]):
        """Print a one-line verdict for a gradient check or evaluation."""
        kind = result.get('kind')
        if kind == 'gradcheck':
            checks = result.get('checks', [])
            failed = sum(1 for c in checks if not c['passed'])
            if failed:
                print(self._paint('fail', f"Gradient check failed: {failed} of {len(checks)} runs"))
            else:
                print(self._paint('success', f"Gradient check passed: {len(checks)} runs"))
        elif kind == 'eval':
            overall = result.get('subsets', {}).get('overall') or {}
            print(f"rec_acc@0.25={_fmt(overall.get('rec_acc@0.25')).strip()}  "
                  f"miou={_fmt(overall.get('miou')).strip()}")

    def export_to_file(self, result: Dict[str, Any], filename: str, format_type: str = 'human'):
        report = self.generate_report(result, format_type)
        with open(filename, 'w', encoding='utf-8') as f:
            f.write(report)
