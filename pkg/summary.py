"""Print cost and noise-robustness tables from the run registry"""
import config
from database import day_runs_frame


def cost_table(df):
    """Mean totals per controller over noise-free days, NoCtrl and OPF included"""
    clean = df[(df['noise_dq'] == 0) & (df['noise_dv'] == 0)]
    if clean.empty:
        return clean
    grouped = clean.groupby('controller')[['Cost-Volt', 'Cost-Loss', 'Total Cost', 'NoCtrl Total', 'OPF Total']].mean()
    grouped['Improvement %'] = 100.0 * (grouped['NoCtrl Total'] - grouped['Total Cost']) / grouped['NoCtrl Total']
    return grouped.sort_values('Total Cost', ascending=False)


def noise_table(df):
    """controller x measurement-noise level -> mean total cost"""
    return df.pivot_table(index='controller', columns='noise_dv', values='Total Cost', aggfunc='mean')


def main():
    df = day_runs_frame()
    print("\n" + "="*60)
    print("⚡ VOLT/VAR CONTROL - RUN SUMMARY")
    print("="*60)
    if df.empty:
        print("\n📭 No simulated days recorded yet. Run `python cli.py simulate` first.")
        print("="*60 + "\n")
        return

    print(f"\n📊 Recorded days: {len(df)}  ({df['controller'].nunique()} controllers)")
    failed = int(df['errors'].sum())
    if failed:
        print(f"   • Truncated episodes: {failed}")

    table = cost_table(df)
    if not table.empty:
        print(f"\n💰 COSTS (noise-free, mean per day):")
        first = table.iloc[0]
        print(f"   • {'NoCtrl':<8} total {first['NoCtrl Total']:.4f}")
        for name, row in table.iterrows():
            print(f"   • {name:<8} volt {row['Cost-Volt']:.4f}  loss {row['Cost-Loss']:.4f}  "
                  f"total {row['Total Cost']:.4f}  ({row['Improvement %']:+.1f}%)")
        if first['OPF Total'] == first['OPF Total']:
            print(f"   • {'OPF':<8} total {first['OPF Total']:.4f}")

    noisy = df[df['noise_dv'] > 0]
    if not noisy.empty:
        print(f"\n📈 TOTAL COST vs MEASUREMENT NOISE:")
        print(noise_table(df).to_string(float_format=lambda x: f"{x:.4f}"))

    print(f"\n📍 DATA LOCATION: {config.DB_PATH}")
    print("="*60 + "\n")


if __name__ == '__main__':
    main()
