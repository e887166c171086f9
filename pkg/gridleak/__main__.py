from sys import exit

from gridleak.cli import main


exit(main())
