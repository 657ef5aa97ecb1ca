from datetime import datetime
from pathlib import Path

from sqlalchemy import create_engine, Column, Integer, String, Float, DateTime
from sqlalchemy.orm import declarative_base, sessionmaker

# One SQLite file per sweep output directory
DB_FILENAME = "sweep.db"

Base = declarative_base()


class SweepCell(Base):
    __tablename__ = "sweep_cells"

    id = Column(Integer, primary_key=True, index=True)
    cell_key = Column(String, unique=True, index=True)  # e.g., "a0.2_b0.2_s1"
    arm = Column(String)                                # "alpha", "beta" or "baseline"
    alpha = Column(Float)
    beta = Column(Float)
    seed = Column(Integer)
    status = Column(String, index=True)                 # "completed" / "failed"
    efficiency = Column(Float)                          # final unperturbed return
    robustness = Column(Float)                          # mean return over the perturbed set
    error = Column(String)
    run_dir = Column(String)
    updated_at = Column(DateTime)


def make_session_factory(db_path):
    """Engine + session factory for a ledger file; creates the tables if they don't exist."""
    db_path = Path(db_path)
    db_path.parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(f"sqlite:///{db_path}", echo=False)
    Base.metadata.create_all(bind=engine)
    return sessionmaker(bind=engine, expire_on_commit=False)


class SweepLedger:
    """Resumable record of sweep cells, keyed by cell_key."""

    def __init__(self, db_path):
        self.db_path = Path(db_path)
        self.Session = make_session_factory(self.db_path)

    def get(self, cell_key):
        with self.Session() as session:
            return session.query(SweepCell).filter_by(cell_key=cell_key).one_or_none()

    def record(self, cell_key, row, run_dir=None):
        with self.Session() as session:
            cell = session.query(SweepCell).filter_by(cell_key=cell_key).one_or_none()
            if cell is None:
                cell = SweepCell(cell_key=cell_key)
                session.add(cell)
            cell.arm = row["arm"]
            cell.alpha = row["alpha"]
            cell.beta = row["beta"]
            cell.seed = row["seed"]
            cell.status = row["status"]
            cell.efficiency = row["efficiency"]
            cell.robustness = row["robustness"]
            cell.error = row.get("error") or None
            cell.run_dir = run_dir
            cell.updated_at = datetime.now()
            session.commit()
            return cell

    def cells(self, status=None):
        with self.Session() as session:
            q = session.query(SweepCell)
            if status is not None:
                q = q.filter_by(status=status)
            return q.order_by(SweepCell.id).all()
