"""
FULL PIPELINE
- Synthesise load/PV days for ucsd49, hold out the last one
- Label the training days with the OPF oracle
- Train NC / DC-1 / DC-2 / FC bundles and certify them
- Simulate the held-out day at every noise level, record and report
"""
import argparse
import os

import config
import database
from comm_setups import SETUP_ORDER, default_box, setup_partition
from controller import build_bundle, save_bundle
from data_exporter import ResultsExporter
from grid import load_network, sensitivity
from learn import DatasetConfig, certifiable_train_config, generate_dataset, save_dataset, train
from profiles import frame_to_days, save_scenarios, split_days, synthesize_days
from sim import NoiseConfig, SimConfig, run_day
from verify import certify_bundle


def run_pipeline(exp: config.ExperimentConfig, workers: int = config.DEFAULT_WORKERS,
                 setups=SETUP_ORDER, export_dir: str = config.EXPORT_DIR) -> dict:
    """Returns {setup: {noise: DayReport}}"""
    net = load_network(exp.network)
    mat = sensitivity(net)
    box = default_box(exp.q_lim_mvar, net.base_mva)
    exporter = ResultsExporter(export_dir)

    print("\n📥 Step 1: Synthesising profiles...")
    frame = synthesize_days(net, exp.n_days, seed=exp.seed)
    save_scenarios(frame, os.path.join(config.DATA_DIR, 'scenarios.csv'))
    days = frame_to_days(net, frame)
    train_days, test_days = split_days(days, holdout_days=1)
    print(f"✅ {len(train_days)} training days, {len(test_days)} held-out day")

    print("\n🏷️  Step 2: Labeling with the OPF oracle...")
    ds_params = {'seed': exp.seed, 'workers': workers, **exp.dataset}
    data = generate_dataset(net, train_days, box, cfg=DatasetConfig(**ds_params))
    save_dataset(data, os.path.join(config.DATA_DIR, 'labels.csv'), net.base_mva)
    print(f"✅ {len(data)} samples ({data.skipped} skipped)")

    tr_params = {'seed': exp.seed, **exp.training}
    sim_params = {'seed': exp.seed, 'workers': 1, **exp.simulation}
    histories = {}
    results = {}
    for setup in setups:
        print(f"\n🧠 Step 3: Training {setup}...")
        bundle = build_bundle(setup_partition(setup, net.controllable), box, net.controllable,
                              epsilon=exp.epsilon, seed=exp.seed, comm_setup=setup)
        bundle, history = train(bundle, data, certifiable_train_config(tr_params, exp.epsilon, mat.X_norm))
        bundle.config_hash = exp.config_hash
        histories[setup] = history
        exporter.export_training_history(history, setup)

        cert = certify_bundle(bundle, mat, seed=exp.seed)
        status = "✅ certified" if cert.ok else "⚠️  not certified: " + '; '.join(cert.reasons)
        print(f"   {status} (L={cert.lipschitz_analytic:.4g}, eps bound {cert.epsilon_bound:.4g})")
        directory = os.path.join(config.BUNDLE_DIR, setup)
        save_bundle(bundle, directory)
        bundle_id = database.record_bundle(bundle, directory, float(history['val_loss'].iloc[-1])
                                           if len(history) else None)

        results[setup] = {}
        for noise in exp.noise_levels:
            cfg = SimConfig(**{**sim_params, 'noise': NoiseConfig(d_v=noise)})
            report = run_day(net, bundle, test_days[0] if test_days else days[-1], cfg)
            database.record_day_run(report, len(train_days), bundle_id)
            results[setup][noise] = report
            own = report.totals.loc[setup]
            print(f"   📊 noise {noise:.1%}: total {own['Total Cost']:.4f} ({own['Improvement %']:+.1f}%)")

    print("\n📤 Step 4: Exporting...")
    clean = [results[s][exp.noise_levels[0]] for s in setups]
    exporter.export_cost_table(clean)
    exporter.plot_voltage_profiles(clean, bus=net.controllable[-1])
    for report in clean:
        exporter.export_voltage_trajectories(report)
    exporter.plot_training_curves(histories)
    return results


def main():
    parser = argparse.ArgumentParser(description='Run the four-bundle Volt/Var pipeline end to end')
    parser.add_argument('--config', help='experiment JSON file')
    parser.add_argument('--workers', type=int, default=config.DEFAULT_WORKERS)
    parser.add_argument('--fresh', action='store_true', help='wipe the run registry first')
    args = parser.parse_args()
    exp = config.load_experiment(args.config) if args.config else config.ExperimentConfig()

    print("\n" + "="*60)
    print("⚡ STABILITY-CONSTRAINED VOLT/VAR PIPELINE")
    print("="*60)
    print(f"Config hash: {exp.config_hash[:12]}")

    database.init_db()
    if args.fresh:
        database.wipe_all_data()

    run_pipeline(exp, workers=args.workers)

    print("\n" + "="*60)
    print("🎉 PIPELINE COMPLETE!")
    print("="*60)
    print(f"\n✅ Run the summary to view results!")
    print("   > python summary.py")


if __name__ == "__main__":
    main()
