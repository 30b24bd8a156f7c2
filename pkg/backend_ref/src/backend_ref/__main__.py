from backend_ref.server import main

raise SystemExit(main())
