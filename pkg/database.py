"""Run registry - trained bundles and simulated days, raw reports kept as JSON"""
import json
from datetime import datetime
from typing import Optional

import pandas as pd
from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine, text
from sqlalchemy.ext.declarative import declarative_base
from sqlalchemy.orm import relationship, sessionmaker

import config

Base = declarative_base()


class BundleRecord(Base):
    __tablename__ = 'bundles'

    id = Column(Integer, primary_key=True)
    comm_setup = Column(String, nullable=False)
    directory = Column(String, nullable=False)
    config_hash = Column(String)
    epsilon = Column(Float)
    lipschitz = Column(Float)
    certified = Column(Integer, default=0)
    val_loss = Column(Float)
    created_at = Column(DateTime, default=datetime.utcnow)
    raw_certification = Column(Text)  # certification record as JSON

    day_runs = relationship("DayRun", back_populates="bundle", cascade="all, delete-orphan")


class DayRun(Base):
    __tablename__ = 'day_runs'

    id = Column(Integer, primary_key=True)
    bundle_id = Column(Integer, ForeignKey('bundles.id'))
    controller = Column(String, nullable=False)
    day_index = Column(Integer, default=0)
    pf_model = Column(String, default='linear')
    noise_dq = Column(Float, default=0.0)
    noise_dv = Column(Float, default=0.0)
    cost_volt = Column(Float)
    cost_loss = Column(Float)
    total_cost = Column(Float)
    noctrl_total = Column(Float)
    opf_total = Column(Float)
    improvement = Column(Float)
    errors = Column(Integer, default=0)
    config_hash = Column(String)
    created_at = Column(DateTime, default=datetime.utcnow)
    raw_report = Column(Text)  # full DayReport.to_dict()

    bundle = relationship("BundleRecord", back_populates="day_runs")


_engine = None
Session = sessionmaker()


def init_db(path: Optional[str] = None):
    """Bind the session factory to a SQLite file (WAL mode) and create the schema"""
    global _engine
    path = path or config.DB_PATH
    _engine = create_engine(
        f'sqlite:///{path}',
        connect_args={
            'timeout': 30,
            'check_same_thread': False
        },
        pool_pre_ping=True
    )
    with _engine.connect() as conn:
        conn.execute(text('PRAGMA journal_mode=WAL'))
        conn.execute(text('PRAGMA synchronous=NORMAL'))
        conn.commit()
    Base.metadata.create_all(_engine)
    Session.configure(bind=_engine)
    return _engine


def get_session():
    """Get a new database session"""
    if _engine is None:
        init_db()
    return Session()


def record_bundle(bundle, directory: str, val_loss: Optional[float] = None) -> int:
    session = get_session()
    try:
        cert = bundle.certification or {}
        row = BundleRecord(
            comm_setup=bundle.comm_setup or '-',
            directory=directory,
            config_hash=bundle.config_hash,
            epsilon=bundle.epsilon,
            lipschitz=bundle.lipschitz,
            certified=int(bool(cert.get('ok'))),
            val_loss=val_loss,
            raw_certification=json.dumps(cert),
        )
        session.add(row)
        session.commit()
        return row.id
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()


def record_day_run(report, day_index: int = 0, bundle_id: Optional[int] = None) -> int:
    """Store one DayReport; the controller's own totals go into the indexed columns"""
    session = get_session()
    try:
        totals = report.totals
        own = totals.loc[report.controller]
        row = DayRun(
            bundle_id=bundle_id,
            controller=report.controller,
            day_index=day_index,
            pf_model=report.pf_model,
            noise_dq=float(report.noise.get('d_q', 0.0)),
            noise_dv=float(report.noise.get('d_v', 0.0)),
            cost_volt=float(own['Cost-Volt']),
            cost_loss=float(own['Cost-Loss']),
            total_cost=float(own['Total Cost']),
            noctrl_total=float(totals.loc['NoCtrl', 'Total Cost']),
            opf_total=float(totals.loc['OPF', 'Total Cost']) if 'OPF' in totals.index else None,
            improvement=float(own['Improvement %']),
            errors=report.errors,
            config_hash=report.config_hash,
            raw_report=json.dumps(report.to_dict(), default=float),
        )
        session.add(row)
        session.commit()
        return row.id
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()


def day_runs_frame() -> pd.DataFrame:
    """Every recorded day as one row, newest last"""
    session = get_session()
    try:
        runs = session.query(DayRun).order_by(DayRun.id).all()
        return pd.DataFrame([{
            'id': r.id,
            'controller': r.controller,
            'day_index': r.day_index,
            'pf_model': r.pf_model,
            'noise_dq': r.noise_dq,
            'noise_dv': r.noise_dv,
            'Cost-Volt': r.cost_volt,
            'Cost-Loss': r.cost_loss,
            'Total Cost': r.total_cost,
            'NoCtrl Total': r.noctrl_total,
            'OPF Total': r.opf_total,
            'Improvement %': r.improvement,
            'errors': r.errors,
            'config_hash': r.config_hash,
        } for r in runs])
    finally:
        session.close()


def day_run_voltages() -> pd.DataFrame:
    """Long-format terminal voltages of every recorded day: run, series, point, bus, v"""
    session = get_session()
    try:
        frames = []
        for r in session.query(DayRun).order_by(DayRun.id).all():
            raw = json.loads(r.raw_report or '{}')
            for series, v in raw.get('terminal_v', {}).items():
                if not v:
                    continue
                df = pd.DataFrame(v, columns=[f'bus{k + 1}' for k in range(len(v[0]))])
                df['point'] = range(len(df))
                frames.append(df.melt(id_vars='point', var_name='bus', value_name='v').assign(
                    run_id=r.id, controller=r.controller, day_index=r.day_index,
                    noise_dv=r.noise_dv, series=series))
        columns = ['run_id', 'controller', 'day_index', 'noise_dv', 'series', 'point', 'bus', 'v']
        if not frames:
            return pd.DataFrame(columns=columns)
        return pd.concat(frames, ignore_index=True)[columns]
    finally:
        session.close()


def wipe_all_data():
    """Wipe all data from database (keep schema)"""
    session = get_session()
    try:
        print("🗑️  Wiping run registry...")
        session.query(DayRun).delete()
        session.query(BundleRecord).delete()
        session.commit()
        print("✅ Registry wiped clean!")
    except Exception as e:
        session.rollback()
        print(f"❌ Error wiping registry: {e}")
    finally:
        session.close()


def latest_bundle_id(directory: str) -> Optional[int]:
    """Newest registry id for a bundle directory, if it was ever recorded"""
    session = get_session()
    try:
        row = session.query(BundleRecord).filter_by(directory=directory).order_by(BundleRecord.id.desc()).first()
        return row.id if row else None
    finally:
        session.close()
