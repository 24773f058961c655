"""Export run results to CSV / JSON tables and static plotly HTML"""
import json
import os
from datetime import datetime
from typing import Dict, List, Optional

import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

import config


class ResultsExporter:
    def __init__(self, export_dir: Optional[str] = None, timestamped: bool = True):
        self.export_dir = export_dir or config.EXPORT_DIR
        self.timestamped = timestamped
        os.makedirs(self.export_dir, exist_ok=True)

    def _path(self, stem: str, ext: str) -> str:
        if self.timestamped:
            stem = f"{stem}_{datetime.now().strftime('%Y%m%d_%H%M%S')}"
        return os.path.join(self.export_dir, f"{stem}.{ext}")

    def export_day_report(self, report, tag: str = '') -> Dict[str, str]:
        """Per-point costs, totals and the raw report of one simulated day"""
        stem = f"day_{tag or report.controller}"
        points = self._path(f"{stem}_points", 'csv')
        totals = self._path(f"{stem}_totals", 'csv')
        raw = self._path(stem, 'json')
        report.points.to_csv(points, index=False)
        report.totals.to_csv(totals)
        with open(raw, 'w') as f:
            json.dump(report.to_dict(), f, indent=2, default=float)
        print(f"Exported day report for {report.controller} to {self.export_dir}")
        return {'points': points, 'totals': totals, 'json': raw}

    def export_cost_table(self, reports: List, name: str = 'cost_table') -> str:
        """One row per controller: NoCtrl first, then each report's controller, OPF last"""
        if not reports:
            raise ValueError("no reports to tabulate")
        rows = [reports[0].totals.loc[['NoCtrl']]]
        rows += [r.totals.loc[[r.controller]] for r in reports]
        if 'OPF' in reports[0].totals.index:
            rows.append(reports[0].totals.loc[['OPF']])
        table = pd.concat(rows)
        table = table[~table.index.duplicated(keep='first')]
        filepath = self._path(name, 'csv')
        table.to_csv(filepath, float_format='%.6g')
        print(f"Exported cost table ({len(table)} controllers) to {filepath}")
        return filepath

    def export_table(self, frame: pd.DataFrame, name: str) -> str:
        filepath = self._path(name, 'csv')
        frame.to_csv(filepath, index=False, float_format='%.6g')
        print(f"Exported {name} ({len(frame)} rows) to {filepath}")
        return filepath

    def export_training_history(self, history: pd.DataFrame, setup: str) -> str:
        filepath = self._path(f"training_{setup}", 'csv')
        history.to_csv(filepath, index=False)
        return filepath

    def export_voltage_trajectories(self, report, tag: str = '') -> str:
        """Long-format terminal voltages: controller, point, bus, v"""
        frames = []
        for label, v in report.terminal_v.items():
            if len(v) == 0:
                continue
            df = pd.DataFrame(v, columns=[f'bus{k + 1}' for k in range(v.shape[1])])
            df['point'] = range(len(df))
            frames.append(df.melt(id_vars='point', var_name='bus', value_name='v').assign(controller=label))
        filepath = self._path(f"voltages_{tag or report.controller}", 'csv')
        pd.concat(frames, ignore_index=True)[['controller', 'point', 'bus', 'v']].to_csv(filepath, index=False)
        return filepath

    def export_trace(self, trace, controllable: Optional[List[int]] = None, tag: str = '') -> str:
        filepath = self._path(f"trace_{tag or 'episode'}", 'csv')
        trace.to_frame(controllable).to_csv(filepath, index=False)
        return filepath

    def plot_voltage_profiles(self, reports: List, bus: int, name: str = 'voltage_profile') -> str:
        """Terminal voltage at `bus` over the day for every controller in `reports`"""
        fig = go.Figure()
        seen = set()
        for report in reports:
            for label, v in report.terminal_v.items():
                if label in seen or len(v) == 0:
                    continue
                seen.add(label)
                fig.add_trace(go.Scatter(
                    y=v[:, bus - 1],
                    mode='lines',
                    name=label,
                ))
        fig.add_hline(y=1.05, line_dash='dash', line_color='grey')
        fig.add_hline(y=0.95, line_dash='dash', line_color='grey')
        fig.update_layout(
            title=f"Bus {bus} voltage over the day",
            xaxis_title='Time point',
            yaxis_title='Voltage (p.u.)',
        )
        filepath = self._path(f"{name}_bus{bus}", 'html')
        fig.write_html(filepath)
        print(f"Wrote {filepath}")
        return filepath

    def plot_training_curves(self, histories: Dict[str, pd.DataFrame], name: str = 'training') -> str:
        frames = [h.assign(setup=setup) for setup, h in histories.items()]
        df = pd.concat(frames, ignore_index=True).melt(
            id_vars=['epoch', 'setup'], value_vars=['train_loss', 'val_loss'],
            var_name='split', value_name='mse',
        )
        fig = px.line(df, x='epoch', y='mse', color='setup', line_dash='split', log_y=True,
                      title='Training curves')
        filepath = self._path(name, 'html')
        fig.write_html(filepath)
        return filepath

    def plot_noise_sweep(self, frame: pd.DataFrame, name: str = 'noise_sweep') -> str:
        fig = px.line(frame, x='noise', y='Total Cost', color='controller', markers=True,
                      title='Total cost under measurement noise')
        filepath = self._path(name, 'html')
        fig.write_html(filepath)
        return filepath
